//! Synthetic recommendation world with exactly answerable queries.
//!
//! Items carry one genre, one director and one or more actors. Users favour
//! a sampled (genre, director) profile, so co-interaction carries attribute
//! signal. Queries come in three categories:
//!
//! * explicit: constraints name the answer's attributes directly;
//! * implicit: one constraint's value is hidden and must be inferred from
//!   two evidence items that share it;
//! * misinformed: that constraint is stated with a wrong value and the
//!   evidence items pin the correct one.
//!
//! In every instance the ground truth is the only candidate that satisfies
//! the resolved constraints.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Attribute, Catalog, CatalogRecord, InteractionGraph, ItemId, RelationVocab};
use crate::seed::rng_for;

pub const GENRE: &str = "genre";
pub const ACTOR: &str = "actor";
pub const DIRECTOR: &str = "director";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Explicit,
    Implicit,
    Misinformed,
}

impl Category {
    pub const ALL: [Category; 3] = [
        Category::Explicit,
        Category::Implicit,
        Category::Misinformed,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Explicit => "explicit",
            Category::Implicit => "implicit",
            Category::Misinformed => "misinformed",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMix {
    pub explicit: f64,
    pub implicit: f64,
    pub misinformed: f64,
}

impl Default for CategoryMix {
    fn default() -> Self {
        CategoryMix {
            explicit: 0.5,
            implicit: 0.3,
            misinformed: 0.2,
        }
    }
}

impl CategoryMix {
    fn weights(&self) -> [f64; 3] {
        [self.explicit, self.implicit, self.misinformed]
    }

    /// Splits `n` by largest remainder so the counts sum to `n` exactly.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let w = self.weights();
        let raw: Vec<f64> = w.iter().map(|x| x * n as f64).collect();
        let mut counts = [0usize; 3];
        for (c, r) in counts.iter_mut().zip(&raw) {
            *c = r.floor() as usize;
        }
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            (raw[b] - raw[b].floor())
                .total_cmp(&(raw[a] - raw[a].floor()))
                .then(a.cmp(&b))
        });
        let mut left = n - counts.iter().sum::<usize>();
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[k] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_items: usize,
    pub num_genres: usize,
    pub num_actors: usize,
    pub num_directors: usize,
    pub attributes_per_item: usize,
    pub num_users: usize,
    pub interactions_per_user: usize,
    /// Probability that an interaction follows the user's profile; 0 gives
    /// uniform interactions.
    pub preference_strength: f64,
    pub candidate_count: usize,
    pub num_queries: usize,
    pub mix: CategoryMix,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_items: 200,
            num_genres: 8,
            num_actors: 30,
            num_directors: 20,
            attributes_per_item: 3,
            num_users: 300,
            interactions_per_user: 20,
            preference_strength: 0.8,
            candidate_count: 20,
            num_queries: 2000,
            mix: CategoryMix::default(),
            max_retries: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.candidate_count < 2 {
            return bad(format!(
                "candidate_count must be >= 2, got {}",
                self.candidate_count
            ));
        }
        if self.num_items < self.candidate_count + 2 {
            return bad("num_items must exceed candidate_count + 2".into());
        }
        if self.num_genres == 0 || self.num_directors < 2 || self.num_actors == 0 {
            return bad("relation vocabularies must be non-empty (>= 2 directors)".into());
        }
        if self.attributes_per_item < 3 {
            return bad("attributes_per_item must be >= 3 (genre, director, actor)".into());
        }
        if self.attributes_per_item - 2 > self.num_actors {
            return bad("attributes_per_item - 2 exceeds the actor vocabulary".into());
        }
        if self.interactions_per_user > self.num_items {
            return bad("interactions_per_user exceeds num_items".into());
        }
        if !(0.0..=1.0).contains(&self.preference_strength) {
            return bad("preference_strength must lie in [0, 1]".into());
        }
        let w = self.mix.weights();
        if w.iter().any(|x| x.is_nan() || *x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!(
                "category mix must be non-negative and sum to 1, got {w:?}"
            ));
        }
        if self.max_retries == 0 {
            return bad("max_retries must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub genre: String,
    pub director: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub catalog: Catalog,
    pub interactions: InteractionGraph,
    pub profiles: Vec<UserProfile>,
}

fn width(n: usize) -> usize {
    n.max(1).to_string().len()
}

pub fn generate_world(config: &SynthConfig) -> Result<World> {
    config.validate()?;
    let mut rng = rng_for(config.seed, "world-items", &[]);
    let w = width(config.num_items);
    let records: Vec<CatalogRecord> = (0..config.num_items)
        .map(|i| {
            let mut attributes = vec![
                Attribute::new(
                    GENRE,
                    &format!("g{}", rng.random_range(0..config.num_genres)),
                ),
                Attribute::new(
                    DIRECTOR,
                    &format!("d{}", rng.random_range(0..config.num_directors)),
                ),
            ];
            let actors = rand::seq::index::sample(
                &mut rng,
                config.num_actors,
                config.attributes_per_item - 2,
            );
            attributes.extend(
                actors
                    .iter()
                    .map(|a| Attribute::new(ACTOR, &format!("a{a}"))),
            );
            CatalogRecord {
                id: format!("i{i:0w$}"),
                title: format!("Film {i:0w$}"),
                attributes,
            }
        })
        .collect();
    let catalog = Catalog::from_records(records, &RelationVocab::default())?;

    let mut rng = rng_for(config.seed, "world-users", &[]);
    let uw = width(config.num_users);
    let mut interactions = InteractionGraph::new(catalog.len());
    let mut profiles = Vec::with_capacity(config.num_users);
    let graph = catalog.graph();
    for u in 0..config.num_users {
        let profile = UserProfile {
            genre: format!("g{}", rng.random_range(0..config.num_genres)),
            director: format!("d{}", rng.random_range(0..config.num_directors)),
        };
        let pools: Vec<Vec<usize>> = [(GENRE, &profile.genre), (DIRECTOR, &profile.director)]
            .iter()
            .map(|(r, v)| {
                graph
                    .items_with(&Attribute::new(r, v))
                    .map(|s| s.iter().copied().collect())
                    .unwrap_or_default()
            })
            .collect();
        let user = format!("u{u:0uw$}");
        let mut added = 0;
        let mut attempts = 0;
        while added < config.interactions_per_user && attempts < 50 * config.interactions_per_user {
            attempts += 1;
            let pool = &pools[rng.random_range(0..pools.len())];
            let item = if rng.random_bool(config.preference_strength) && !pool.is_empty() {
                *pool.choose(&mut rng).unwrap()
            } else {
                rng.random_range(0..catalog.len())
            };
            if interactions.add(&user, item) {
                added += 1;
            }
        }
        profiles.push(profile);
    }
    Ok(World {
        catalog,
        interactions,
        profiles,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraint {
    pub relation: String,
    /// `None` when the value must be inferred from the evidence items.
    pub value: Option<String>,
    /// True for the constraint the evidence items speak to.
    #[serde(default)]
    pub evidence: bool,
}

impl Constraint {
    fn stated(relation: &str, value: &str) -> Self {
        Constraint {
            relation: relation.into(),
            value: Some(value.into()),
            evidence: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryInstance {
    pub query_id: String,
    pub category: Category,
    pub constraints: Vec<Constraint>,
    #[serde(default)]
    pub evidence: Vec<ItemId>,
    pub ground_truth: ItemId,
    pub candidates: Vec<ItemId>,
}

/// Value shared by every evidence item for `relation`, if exactly one.
fn evidence_value(catalog: &Catalog, evidence: &[usize], relation: &str) -> Option<String> {
    let mut common: Option<BTreeSet<&str>> = None;
    for &e in evidence {
        let vals: BTreeSet<&str> = catalog.graph().values_of(e, relation).collect();
        common = Some(match common {
            None => vals,
            Some(c) => c.intersection(&vals).copied().collect(),
        });
    }
    let common = common?;
    (common.len() == 1).then(|| common.into_iter().next().unwrap().to_string())
}

/// Constraints with evidence-linked values replaced by what the evidence
/// items agree on.
pub fn resolve_constraints(instance: &QueryInstance, catalog: &Catalog) -> Result<Vec<Attribute>> {
    let invalid = |message: String| Error::InvalidInstance {
        query_id: instance.query_id.clone(),
        message,
    };
    let evidence = instance
        .evidence
        .iter()
        .map(|id| catalog.index_of(id))
        .collect::<Result<Vec<_>>>()?;
    instance
        .constraints
        .iter()
        .map(|c| {
            let value = if c.evidence {
                if evidence.is_empty() {
                    return Err(invalid(
                        "evidence-linked constraint without evidence items".into(),
                    ));
                }
                evidence_value(catalog, &evidence, &c.relation).ok_or_else(|| {
                    invalid(format!(
                        "evidence items do not agree on a single `{}`",
                        c.relation
                    ))
                })?
            } else {
                c.value.clone().ok_or_else(|| {
                    invalid(format!("constraint on `{}` has no value", c.relation))
                })?
            };
            Ok(Attribute::new(&c.relation, &value))
        })
        .collect()
}

/// Candidate slots whose items carry every attribute in `constraints`.
pub fn items_matching(
    instance: &QueryInstance,
    constraints: &[Attribute],
    catalog: &Catalog,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (slot, id) in instance.candidates.iter().enumerate() {
        let idx = catalog.index_of(id)?;
        if constraints
            .iter()
            .all(|a| catalog.graph().attributes(idx).contains(a))
        {
            out.push(slot);
        }
    }
    Ok(out)
}

/// Resolves the constraints and returns the unique satisfying candidate.
pub fn oracle_answer(instance: &QueryInstance, catalog: &Catalog) -> Result<ItemId> {
    let resolved = resolve_constraints(instance, catalog)?;
    let matches = items_matching(instance, &resolved, catalog)?;
    match matches.as_slice() {
        [slot] => Ok(instance.candidates[*slot].clone()),
        other => Err(Error::InvalidInstance {
            query_id: instance.query_id.clone(),
            message: format!(
                "{} candidates satisfy the resolved constraints",
                other.len()
            ),
        }),
    }
}

/// Constraints, evidence items, ground truth and candidates, as indices.
type Draft = (Vec<Constraint>, Vec<usize>, usize, Vec<usize>);

fn try_generate(
    category: Category,
    catalog: &Catalog,
    candidate_count: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Draft> {
    let n = catalog.len();
    let gt = rng.random_range(0..n);
    let graph = catalog.graph();

    let (constraints, evidence, resolved, trap) = match category {
        Category::Explicit => {
            let mut rels = [GENRE, DIRECTOR, ACTOR];
            rels.shuffle(rng);
            let mut cs = Vec::new();
            let mut resolved = Vec::new();
            for r in &rels[..2] {
                let vals: Vec<&str> = graph.values_of(gt, r).collect();
                let v = *vals.choose(rng)?;
                cs.push(Constraint::stated(r, v));
                resolved.push(Attribute::new(r, v));
            }
            (cs, Vec::new(), resolved, None)
        }
        Category::Implicit | Category::Misinformed => {
            let hidden = *[DIRECTOR, ACTOR].choose(rng)?;
            let stated = if hidden == DIRECTOR {
                *[GENRE, ACTOR].choose(rng)?
            } else {
                *[GENRE, DIRECTOR].choose(rng)?
            };
            let stated_vals: Vec<&str> = graph.values_of(gt, stated).collect();
            let stated_attr = Attribute::new(stated, stated_vals.choose(rng)?);
            let hidden_vals: Vec<&str> = graph.values_of(gt, hidden).collect();
            let true_attr = Attribute::new(hidden, hidden_vals.choose(rng)?);
            let mut pool: Vec<usize> = graph
                .items_with(&true_attr)?
                .iter()
                .copied()
                .filter(|&i| i != gt)
                .collect();
            if pool.len() < 2 {
                return None;
            }
            pool.shuffle(rng);
            let evidence = vec![pool[0], pool[1]];
            if evidence_value(catalog, &evidence, hidden).as_deref()
                != Some(true_attr.value.as_str())
            {
                return None;
            }
            let (value, trap) = if category == Category::Implicit {
                (None, None)
            } else {
                let wrong: Vec<&Attribute> = graph
                    .inverse()
                    .keys()
                    .filter(|a| a.relation == hidden && a.value != true_attr.value)
                    .collect();
                let w = (*wrong.choose(rng)?).clone();
                (Some(w.value.clone()), Some((stated_attr.clone(), w)))
            };
            let cs = vec![
                Constraint::stated(stated, &stated_attr.value),
                Constraint {
                    relation: hidden.into(),
                    value,
                    evidence: true,
                },
            ];
            (cs, evidence, vec![stated_attr, true_attr], trap)
        }
    };

    let satisfies = |i: usize| resolved.iter().all(|a| graph.attributes(i).contains(a));
    if !satisfies(gt) {
        return None;
    }

    let excluded: HashSet<usize> = evidence.iter().copied().chain([gt]).collect();
    let eligible: Vec<usize> = (0..n)
        .filter(|i| !excluded.contains(i) && !satisfies(*i))
        .collect();
    if eligible.len() < candidate_count - 1 {
        return None;
    }
    // Near misses share at least one resolved attribute; they make up to a
    // third of the negatives.
    let (mut near, mut far): (Vec<usize>, Vec<usize>) = eligible
        .iter()
        .partition(|&&i| resolved.iter().any(|a| graph.attributes(i).contains(a)));
    near.shuffle(rng);
    far.shuffle(rng);
    let mut negatives = Vec::with_capacity(candidate_count - 1);
    if let Some((stated_attr, trap_attr)) = &trap {
        if let Some(pos) = near.iter().position(|&i| {
            graph.attributes(i).contains(stated_attr) && graph.attributes(i).contains(trap_attr)
        }) {
            negatives.push(near.remove(pos));
        }
    }
    let near_quota = (candidate_count - 1) / 3;
    while negatives.len() < near_quota {
        match near.pop() {
            Some(i) => negatives.push(i),
            None => break,
        }
    }
    let mut rest: Vec<usize> = far.into_iter().chain(near).collect();
    rest.shuffle(rng);
    negatives.extend(rest.into_iter().take(candidate_count - 1 - negatives.len()));

    let mut candidates = negatives;
    candidates.push(gt);
    candidates.shuffle(rng);
    Some((constraints, evidence, gt, candidates))
}

/// Generates one instance, retrying up to `max_retries` times.
pub fn generate_query(
    query_id: &str,
    category: Category,
    catalog: &Catalog,
    candidate_count: usize,
    max_retries: usize,
    seed: u64,
) -> Result<QueryInstance> {
    let mut rng = rng_for(seed, "query", &[]);
    for _ in 0..max_retries {
        if let Some((constraints, evidence, gt, candidates)) =
            try_generate(category, catalog, candidate_count, &mut rng)
        {
            let ids = |v: &[usize]| {
                v.iter()
                    .map(|&i| catalog.item(i).id.clone())
                    .collect::<Vec<_>>()
            };
            let instance = QueryInstance {
                query_id: query_id.to_string(),
                category,
                constraints,
                evidence: ids(&evidence),
                ground_truth: catalog.item(gt).id.clone(),
                candidates: ids(&candidates),
            };
            if oracle_answer(&instance, catalog).ok().as_ref() == Some(&instance.ground_truth) {
                return Ok(instance);
            }
        }
    }
    Err(Error::Generation(format!(
        "could not build a unique-answer {category} query `{query_id}` in {max_retries} attempts"
    )))
}

/// Generates `config.num_queries` instances with exact category counts.
pub fn generate_queries(config: &SynthConfig, catalog: &Catalog) -> Result<Vec<QueryInstance>> {
    config.validate()?;
    let counts = config.mix.counts(config.num_queries);
    let mut categories: Vec<Category> = Category::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
        .collect();
    categories.shuffle(&mut rng_for(config.seed, "query-categories", &[]));
    let w = width(config.num_queries);
    categories
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            generate_query(
                &format!("q{i:0w$}"),
                c,
                catalog,
                config.candidate_count,
                config.max_retries,
                crate::seed::derive_seed(config.seed, "query", &[i as u64]),
            )
        })
        .collect()
}

/// Flat symbolic encoding: category marker, constraints, evidence,
/// candidates, end marker.
pub fn render_query_tokens(instance: &QueryInstance) -> Vec<String> {
    let mut out = vec![format!("<{}>", instance.category)];
    for c in &instance.constraints {
        let v = c.value.as_deref().unwrap_or("?");
        out.push(if c.evidence {
            format!("{}={}@evidence", c.relation, v)
        } else {
            format!("{}={}", c.relation, v)
        });
    }
    if !instance.evidence.is_empty() {
        out.push("<evidence>".into());
        out.extend(instance.evidence.iter().map(|e| e.0.clone()));
    }
    out.push("<candidates>".into());
    out.extend(instance.candidates.iter().map(|c| c.0.clone()));
    out.push("<end>".into());
    out
}

pub fn write_queries(path: &Path, queries: &[QueryInstance]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for q in queries {
        serde_json::to_writer(&mut out, q)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryInstance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
