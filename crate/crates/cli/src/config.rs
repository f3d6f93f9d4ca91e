use std::fs;
use std::path::{Path, PathBuf};

use qrec_core::embedding::MfConfig;
use qrec_core::seed::sha256_hex;
use qrec_core::{CategoryMix, Error, PenaltyWeight, Result, SynthConfig, TrainerConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingProvider {
    /// Normalized user-incidence vectors.
    Baseline,
    /// Pairwise-ranking matrix factorization.
    Factorization,
}

/// Flat run configuration. Every key is optional in the file; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub catalog: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub interactions_header: bool,
    pub queries: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,

    pub embedding_provider: EmbeddingProvider,
    pub mf_dims: usize,
    pub mf_epochs: usize,
    pub mf_learning_rate: f64,
    pub mf_regularization: f64,

    pub num_items: usize,
    pub num_genres: usize,
    pub num_actors: usize,
    pub num_directors: usize,
    pub attributes_per_item: usize,
    pub num_users: usize,
    pub interactions_per_user: usize,
    pub preference_strength: f64,
    pub candidate_count: usize,
    pub num_queries: usize,
    pub mix_explicit: f64,
    pub mix_implicit: f64,
    pub mix_misinformed: f64,
    pub max_retries: usize,

    pub learning_rate: f64,
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_coefficient: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub max_response_length: usize,
    pub inner_updates: usize,
    pub w_penalty: PenaltyWeight,
    pub w1: f64,
    pub w2: f64,
    pub tau: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let t = TrainerConfig::default();
        let m = MfConfig::default();
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            catalog: None,
            interactions: None,
            interactions_header: true,
            queries: None,
            embeddings: None,
            embedding_provider: EmbeddingProvider::Factorization,
            mf_dims: m.dims,
            mf_epochs: m.epochs,
            mf_learning_rate: m.learning_rate,
            mf_regularization: m.regularization,
            num_items: s.num_items,
            num_genres: s.num_genres,
            num_actors: s.num_actors,
            num_directors: s.num_directors,
            attributes_per_item: s.attributes_per_item,
            num_users: s.num_users,
            interactions_per_user: s.interactions_per_user,
            preference_strength: s.preference_strength,
            candidate_count: s.candidate_count,
            num_queries: s.num_queries,
            mix_explicit: s.mix.explicit,
            mix_implicit: s.mix.implicit,
            mix_misinformed: s.mix.misinformed,
            max_retries: s.max_retries,
            learning_rate: t.learning_rate,
            group_size: t.group_size,
            clip_epsilon: t.clip_epsilon,
            kl_coefficient: t.kl_coefficient,
            temperature: t.temperature,
            batch_size: t.batch_size,
            max_response_length: t.max_response_length,
            inner_updates: t.inner_updates,
            w_penalty: t.w_penalty,
            w1: t.w1,
            w2: t.w2,
            tau: t.tau,
            max_epochs: t.max_epochs,
            patience: t.patience,
            validation_fraction: t.validation_fraction,
            test_fraction: t.test_fraction,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Pretty JSON with every key present, in declaration order.
    pub fn canonical(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Hash of the canonical form with the output directory blanked, so
    /// moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_hex(
            serde_json::to_string(&c)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Identity for resuming: everything except the epoch budget.
    pub fn resume_hash(&self) -> String {
        RunConfig {
            max_epochs: 0,
            ..self.clone()
        }
        .hash()
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_items: self.num_items,
            num_genres: self.num_genres,
            num_actors: self.num_actors,
            num_directors: self.num_directors,
            attributes_per_item: self.attributes_per_item,
            num_users: self.num_users,
            interactions_per_user: self.interactions_per_user,
            preference_strength: self.preference_strength,
            candidate_count: self.candidate_count,
            num_queries: self.num_queries,
            mix: CategoryMix {
                explicit: self.mix_explicit,
                implicit: self.mix_implicit,
                misinformed: self.mix_misinformed,
            },
            max_retries: self.max_retries,
            seed: self.seed,
        }
    }

    pub fn mf(&self) -> MfConfig {
        MfConfig {
            dims: self.mf_dims,
            epochs: self.mf_epochs,
            learning_rate: self.mf_learning_rate,
            regularization: self.mf_regularization,
            seed: self.seed,
        }
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            learning_rate: self.learning_rate,
            group_size: self.group_size,
            clip_epsilon: self.clip_epsilon,
            kl_coefficient: self.kl_coefficient,
            temperature: self.temperature,
            batch_size: self.batch_size,
            max_response_length: self.max_response_length,
            inner_updates: self.inner_updates,
            w_penalty: self.w_penalty,
            w1: self.w1,
            w2: self.w2,
            tau: self.tau,
            seed: self.seed,
            max_epochs: self.max_epochs,
            patience: self.patience,
            validation_fraction: self.validation_fraction,
            test_fraction: self.test_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.catalog.is_none() {
            self.synth().validate()?;
        }
        if self.catalog.is_none() && (self.interactions.is_some() || self.queries.is_some()) {
            return Err(Error::Config(
                "`interactions` and `queries` require `catalog`".into(),
            ));
        }
        if self.mf_dims < 2
            || self.mf_learning_rate.is_nan()
            || self.mf_learning_rate <= 0.0
            || self.mf_regularization.is_nan()
            || self.mf_regularization < 0.0
        {
            return Err(Error::Config(
                "invalid matrix factorization settings".into(),
            ));
        }
        self.trainer().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_canonically() {
        let c = RunConfig::default();
        let text = c.canonical();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical(), text);
        assert_eq!(RunConfig::parse("{}").unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::parse(r#"{"learning_rat": 0.1}"#).is_err());
        assert!(RunConfig::parse(r#"{"w_penalty": 1.5}"#).is_err());
        let c = RunConfig::parse(r#"{"group_size": 1}"#).unwrap();
        assert!(c.validate().unwrap_err().is_validation());
    }

    #[test]
    fn hash_ignores_out_dir_and_resume_ignores_epochs() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig {
            max_epochs: 3,
            ..a.clone()
        };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.resume_hash(), c.resume_hash());
    }
}
