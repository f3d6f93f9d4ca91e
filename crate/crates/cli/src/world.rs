use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use qrec_core::embedding::{baseline_embeddings, train_mf_embeddings, EmbeddingExport};
use qrec_core::graph::{load_catalog, load_interactions};
use qrec_core::seed::sha256_hex;
use qrec_core::synth::{generate_queries, generate_world, load_queries, write_queries};
use qrec_core::{
    Catalog, EmbeddingTable, Error, InteractionGraph, QueryInstance, RelationVocab, Result,
};
use serde::{Deserialize, Serialize};

use crate::config::{EmbeddingProvider, RunConfig};

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub struct WorldData {
    pub catalog: Catalog,
    pub interactions: InteractionGraph,
    pub queries: Vec<QueryInstance>,
    /// True when the world came from the generator rather than from files.
    pub generated: bool,
}

impl WorldData {
    /// Content hash over catalog, interactions and queries.
    pub fn hash(&self) -> String {
        let edges: Vec<(&str, &str)> = self
            .interactions
            .edges()
            .map(|(u, i)| {
                (
                    self.interactions.users()[u].as_str(),
                    self.catalog.item(i).id.as_str(),
                )
            })
            .collect();
        let body = serde_json::to_vec(&(self.catalog.to_records(), edges, &self.queries))
            .expect("world serializes");
        sha256_hex(&body)
    }

    pub fn write(&self, dir: &Path, interactions_header: bool) -> Result<()> {
        self.catalog.write_jsonl(&dir.join(CATALOG_FILE))?;
        self.interactions.write_csv(
            &self.catalog,
            &dir.join(INTERACTIONS_FILE),
            interactions_header,
        )?;
        write_queries(&dir.join(QUERIES_FILE), &self.queries)
    }
}

/// Loads the configured files, or generates a world from the seed when no
/// catalog path is set.
pub fn load_or_generate(cfg: &RunConfig) -> Result<WorldData> {
    match &cfg.catalog {
        None => {
            let synth = cfg.synth();
            let world = generate_world(&synth)?;
            let queries = generate_queries(&synth, &world.catalog)?;
            Ok(WorldData {
                catalog: world.catalog,
                interactions: world.interactions,
                queries,
                generated: true,
            })
        }
        Some(path) => {
            let catalog = load_catalog(path, &RelationVocab::default())?;
            let interactions = match &cfg.interactions {
                Some(p) => load_interactions(p, &catalog, cfg.interactions_header)?,
                None => InteractionGraph::new(catalog.len()),
            };
            let queries = match &cfg.queries {
                Some(p) => load_queries(p)?,
                None => Vec::new(),
            };
            Ok(WorldData {
                catalog,
                interactions,
                queries,
                generated: false,
            })
        }
    }
}

pub fn embeddings(cfg: &RunConfig, world: &WorldData) -> Result<EmbeddingTable> {
    if let Some(path) = &cfg.embeddings {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let export: EmbeddingExport = serde_json::from_str(&text)?;
        return export.into_table(&world.catalog);
    }
    match cfg.embedding_provider {
        EmbeddingProvider::Baseline => baseline_embeddings(&world.interactions),
        EmbeddingProvider::Factorization if world.interactions.edge_count() == 0 => {
            EmbeddingTable::from_vectors(
                vec![vec![0.0; cfg.mf_dims]; world.catalog.len()],
                qrec_core::Provenance::Trained,
            )
        }
        EmbeddingProvider::Factorization => train_mf_embeddings(&world.interactions, &cfg.mf()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub world_hash: String,
    /// sha256 of each file written by the command, by file name.
    pub files: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub results: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, world_hash: String) -> Self {
        Manifest {
            command: command.into(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            world_hash,
            files: BTreeMap::new(),
            results: BTreeMap::new(),
        }
    }

    pub fn record_file(&mut self, dir: &Path, name: &str) -> Result<()> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.files.insert(name.into(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
