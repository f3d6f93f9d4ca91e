#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qrec_cli::RunConfig;

/// A world small enough for debug-build training runs.
pub fn small_config(out: &Path) -> RunConfig {
    RunConfig {
        out_dir: out.to_path_buf(),
        seed: 3,
        num_items: 60,
        num_users: 40,
        interactions_per_user: 8,
        num_queries: 120,
        candidate_count: 10,
        mf_epochs: 5,
        max_epochs: 3,
        ..RunConfig::default()
    }
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("run.json");
    fs::write(&path, cfg.canonical()).unwrap();
    path
}

pub fn qrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrec"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Four films; m0 and m1 share their audience.
pub fn tiny_world(dir: &Path) -> RunConfig {
    fs::create_dir_all(dir).unwrap();
    let catalog = dir.join("catalog.jsonl");
    let mut lines = String::new();
    for i in 0..4 {
        lines.push_str(&format!(
            "{{\"id\":\"m{i}\",\"title\":\"Film {i}\",\"attributes\":[{{\"relation\":\"genre\",\"value\":\"g{}\"}},{{\"relation\":\"director\",\"value\":\"d{i}\"}}]}}\n",
            i % 2
        ));
    }
    fs::write(&catalog, lines).unwrap();
    let interactions = dir.join("interactions.csv");
    fs::write(
        &interactions,
        "user_id,item_id\nu1,m0\nu1,m1\nu2,m0\nu2,m1\nu3,m2\nu4,m3\n",
    )
    .unwrap();
    RunConfig {
        out_dir: dir.join("out"),
        catalog: Some(catalog),
        interactions: Some(interactions),
        embedding_provider: qrec_cli::config::EmbeddingProvider::Baseline,
        ..RunConfig::default()
    }
}
