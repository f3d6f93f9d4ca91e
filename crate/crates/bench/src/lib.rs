//! Fixtures shared by the benchmarks.

use qrec_core::embedding::train_mf_embeddings;
use qrec_core::synth::{generate_queries, generate_world};
use qrec_core::{Environment, MfConfig, Result, SynthConfig, TrainerConfig};

/// The default generated world with trained embeddings, ready for rollouts.
pub fn environment(seed: u64) -> Result<Environment> {
    let synth = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let world = generate_world(&synth)?;
    let queries = generate_queries(&synth, &world.catalog)?;
    let embeddings = train_mf_embeddings(&world.interactions, &MfConfig::default())?;
    Environment::new(
        world.catalog,
        embeddings,
        queries,
        TrainerConfig::default().max_response_length,
    )
}

/// Trainer defaults with `seed`.
pub fn trainer_config(seed: u64) -> TrainerConfig {
    TrainerConfig {
        seed,
        ..TrainerConfig::default()
    }
}
