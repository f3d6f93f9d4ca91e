//! Item embeddings from the interaction graph.
//!
//! Two providers: the exact incidence baseline (each item is its binary
//! user-incidence vector, L2-normalized) and a pairwise-ranking matrix
//! factorization trained with SGD on (user, positive, negative) triples.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Catalog, InteractionGraph};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Baseline,
    Trained,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dims: usize,
    data: Vec<f64>,
    cold: Vec<bool>,
    provenance: Provenance,
}

impl EmbeddingTable {
    pub fn from_vectors(vectors: Vec<Vec<f64>>, provenance: Provenance) -> Result<Self> {
        let dims = vectors.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(dims * vectors.len());
        let mut cold = Vec::with_capacity(vectors.len());
        for v in &vectors {
            if v.len() != dims {
                return Err(Error::Validation(format!(
                    "embedding dimension mismatch: {} vs {dims}",
                    v.len()
                )));
            }
            cold.push(v.iter().all(|&x| x == 0.0));
            data.extend_from_slice(v);
        }
        Ok(EmbeddingTable {
            dims,
            data,
            cold,
            provenance,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.cold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cold.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn vector(&self, item: usize) -> Option<&[f64]> {
        (item < self.len()).then(|| &self.data[item * self.dims..(item + 1) * self.dims])
    }

    pub fn is_cold(&self, item: usize) -> bool {
        self.cold[item]
    }

    /// Raw cosine similarity; `None` when either vector is zero.
    pub fn cosine(&self, a: usize, b: usize) -> Option<f64> {
        if self.cold[a] || self.cold[b] {
            return None;
        }
        let (va, vb) = (self.vector(a)?, self.vector(b)?);
        let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        Some(dot / (na * nb))
    }

    pub fn to_export(&self, catalog: &Catalog) -> EmbeddingExport {
        EmbeddingExport {
            dims: self.dims,
            provenance: self.provenance,
            items: (0..self.len())
                .map(|i| EmbeddingRecord {
                    id: catalog.item(i).id.0.clone(),
                    cold: self.cold[i],
                    vector: self.vector(i).unwrap().to_vec(),
                })
                .collect(),
        }
    }
}

impl EmbeddingExport {
    /// Rebuilds a table in catalog order. Every catalog item must appear
    /// exactly once.
    pub fn into_table(self, catalog: &Catalog) -> Result<EmbeddingTable> {
        let mut rows: Vec<Option<Vec<f64>>> = vec![None; catalog.len()];
        for rec in self.items {
            let idx = catalog.lookup(&rec.id)?;
            if rec.vector.len() != self.dims {
                return Err(Error::Validation(format!(
                    "embedding for `{}` has {} dims, expected {}",
                    rec.id,
                    rec.vector.len(),
                    self.dims
                )));
            }
            if rec.cold != rec.vector.iter().all(|&x| x == 0.0) {
                return Err(Error::Validation(format!(
                    "cold flag of `{}` disagrees with its vector",
                    rec.id
                )));
            }
            if rows[idx].replace(rec.vector).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate embedding for `{}`",
                    rec.id
                )));
            }
        }
        let vectors = rows
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| {
                    Error::Validation(format!("no embedding for `{}`", catalog.item(i).id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        EmbeddingTable::from_vectors(vectors, self.provenance)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingExport {
    pub dims: usize,
    pub provenance: Provenance,
    pub items: Vec<EmbeddingRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub cold: bool,
    pub vector: Vec<f64>,
}

/// Binary user-incidence vectors, L2-normalized. Cold items stay zero.
pub fn baseline_embeddings(graph: &InteractionGraph) -> Result<EmbeddingTable> {
    if graph.item_count() == 0 {
        return Err(Error::Validation(
            "baseline embeddings need a non-empty catalog".into(),
        ));
    }
    let users = graph.user_count();
    let vectors = (0..graph.item_count())
        .map(|i| {
            let holders = graph.users_of(i);
            let mut v = vec![0.0; users];
            if !holders.is_empty() {
                let w = 1.0 / (holders.len() as f64).sqrt();
                for &u in holders {
                    v[u] = w;
                }
            }
            v
        })
        .collect();
    EmbeddingTable::from_vectors(vectors, Provenance::Baseline)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfConfig {
    pub dims: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            dims: 16,
            epochs: 50,
            learning_rate: 0.05,
            regularization: 0.01,
            seed: 0,
        }
    }
}

/// Pairwise-ranking factorization: maximizes `ln σ(u·(v_pos − v_neg))` with
/// L2 shrinkage. Deterministic given `config.seed`.
pub fn train_mf_embeddings(graph: &InteractionGraph, config: &MfConfig) -> Result<EmbeddingTable> {
    if config.dims < 2 {
        return Err(Error::Config(format!(
            "embedding dims must be >= 2, got {}",
            config.dims
        )));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Config(
            "embedding learning rate must be positive".into(),
        ));
    }
    let mut edges: Vec<(usize, usize)> = graph.edges().collect();
    if edges.is_empty() {
        return Err(Error::Training(
            "cannot train embeddings without interactions".into(),
        ));
    }
    let (n_users, n_items, d) = (graph.user_count(), graph.item_count(), config.dims);
    let mut rng = rng_for(config.seed, "mf-embeddings", &[]);
    let mut init =
        |n: usize| -> Vec<f64> { (0..n * d).map(|_| rng.random_range(-0.1..0.1)).collect() };
    let mut users = init(n_users);
    let mut items = init(n_items);
    let (lr, reg) = (config.learning_rate, config.regularization);

    let mut rng = rng_for(config.seed, "mf-epochs", &[]);
    for _ in 0..config.epochs {
        edges.shuffle(&mut rng);
        for &(u, pos) in &edges {
            let seen = graph.items_of(u);
            if seen.len() == n_items {
                continue;
            }
            let neg = loop {
                let j = rng.random_range(0..n_items);
                if !seen.contains(&j) {
                    break j;
                }
            };
            let (uo, po, no) = (u * d, pos * d, neg * d);
            let x: f64 = (0..d)
                .map(|k| users[uo + k] * (items[po + k] - items[no + k]))
                .sum();
            let g = 1.0 / (1.0 + x.exp());
            for k in 0..d {
                let (uk, pk, nk) = (users[uo + k], items[po + k], items[no + k]);
                users[uo + k] += lr * (g * (pk - nk) - reg * uk);
                items[po + k] += lr * (g * uk - reg * pk);
                items[no + k] += lr * (-g * uk - reg * nk);
            }
        }
    }

    let vectors = (0..n_items)
        .map(|i| {
            if graph.users_of(i).is_empty() {
                vec![0.0; d]
            } else {
                items[i * d..(i + 1) * d].to_vec()
            }
        })
        .collect();
    EmbeddingTable::from_vectors(vectors, Provenance::Trained)
}
