use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use qrec_core::advantage::{analyze_response, raae_group};
use qrec_core::curriculum::SCHEDULE_HEADER;
use qrec_core::trainer::{evaluate, StopReason, Trainer, METRICS_HEADER};
use qrec_core::{
    CandidateSet, Environment, Error, EvalReport, ItemId, LogLinearPolicy, PenaltyWeight, Result,
    ShapedReward,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::world::{
    create_dir, embeddings, load_or_generate, Manifest, WorldData, CATALOG_FILE, EMBEDDINGS_FILE,
    INTERACTIONS_FILE, QUERIES_FILE,
};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SCHEDULE_FILE: &str = "schedule.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes catalog, interactions, queries and a manifest.
pub fn cmd_gen(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    if cfg.catalog.is_some() {
        return Err(Error::Config(
            "`gen` generates a world; unset `catalog`".into(),
        ));
    }
    let world = load_or_generate(cfg)?;
    let dir = &cfg.out_dir;
    create_dir(dir)?;
    world.write(dir, cfg.interactions_header)?;
    let mut manifest = Manifest::new("gen", cfg, world.hash());
    for f in [CATALOG_FILE, INTERACTIONS_FILE, QUERIES_FILE] {
        manifest.record_file(dir, f)?;
    }
    manifest.write(dir)?;
    eprintln!(
        "gen: {} items, {} interactions, {} queries -> {}",
        world.catalog.len(),
        world.interactions.edge_count(),
        world.queries.len(),
        dir.display()
    );
    Ok(manifest)
}

/// Computes item embeddings with the configured provider.
pub fn cmd_embed(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let world = load_or_generate(cfg)?;
    let table = embeddings(cfg, &world)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(EMBEDDINGS_FILE);
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, &table.to_export(&world.catalog))?;
    out.write_all(b"\n").map_err(io_err(&path))?;
    out.flush().map_err(io_err(&path))?;
    let cold = (0..table.len()).filter(|&i| table.is_cold(i)).count();
    eprintln!(
        "embed: {} items x {} dims ({cold} cold) -> {}",
        table.len(),
        table.dims(),
        path.display()
    );
    Ok(path)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreInput {
    query_id: String,
    ground_truth: ItemId,
    candidates: Vec<ItemId>,
    responses: Vec<ScoreResponse>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreResponse {
    text: String,
    #[serde(default)]
    token_spans: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ScoreOutput {
    pub query_id: String,
    pub response_index: usize,
    pub shaped_reward: ShapedReward,
    pub segment_rewards: Vec<f64>,
    pub token_advantages: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ScoreError {
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub error: String,
}

#[derive(Debug, Default, PartialEq)]
pub struct ScoreSummary {
    pub records: usize,
    pub responses: usize,
    pub failures: usize,
    pub output: PathBuf,
}

fn score_group(
    input: &ScoreInput,
    world: &WorldData,
    emb: &qrec_core::EmbeddingTable,
    cfg: &RunConfig,
) -> Result<Vec<ScoreOutput>> {
    if !input.candidates.contains(&input.ground_truth) {
        world.catalog.index_of(&input.ground_truth)?;
        return Err(Error::Validation(
            "ground truth is not among the candidates".into(),
        ));
    }
    let candidates = CandidateSet::new(&world.catalog, &input.candidates)?;
    let weights = cfg.trainer().reward_weights();
    let analyzed = input
        .responses
        .iter()
        .map(|r| {
            let spans: Option<Vec<Range<usize>>> = r
                .token_spans
                .as_ref()
                .map(|s| s.iter().map(|[a, b]| *a..*b).collect());
            analyze_response(
                &r.text,
                spans.as_deref(),
                &candidates,
                &input.ground_truth,
                &world.catalog,
                emb,
                &weights,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let (segment_rewards, adv) = raae_group(&analyzed, &input.ground_truth, cfg.w_penalty)?;
    Ok(analyzed
        .into_iter()
        .zip(segment_rewards)
        .zip(adv.advantages)
        .enumerate()
        .map(|(i, ((a, s), t))| ScoreOutput {
            query_id: input.query_id.clone(),
            response_index: i,
            shaped_reward: a.shaped,
            segment_rewards: s,
            token_advantages: t,
        })
        .collect())
}

/// Scores a rollout JSONL file offline. Bad records become error entries in
/// the output instead of aborting the run.
pub fn cmd_score(cfg: &RunConfig, rollouts: &Path) -> Result<ScoreSummary> {
    cfg.validate()?;
    let world = load_or_generate(cfg)?;
    let emb = embeddings(cfg, &world)?;
    let input = File::open(rollouts).map_err(io_err(rollouts))?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(SCORES_FILE);
    let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    let mut summary = ScoreSummary {
        output: path.clone(),
        ..ScoreSummary::default()
    };
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(io_err(rollouts))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = n + 1;
        let result = serde_json::from_str::<ScoreInput>(&line)
            .map_err(|e| (None, format!("malformed record: {e}")))
            .and_then(|rec| {
                score_group(&rec, &world, &emb, cfg)
                    .map_err(|e| (Some(rec.query_id.clone()), e.to_string()))
            });
        summary.records += 1;
        match result {
            Ok(outputs) => {
                for o in &outputs {
                    serde_json::to_writer(&mut out, o)?;
                    out.write_all(b"\n").map_err(io_err(&path))?;
                }
                summary.responses += outputs.len();
            }
            Err((query_id, error)) => {
                eprintln!("score: line {lineno}: {error}");
                summary.failures += 1;
                let entry = ScoreError {
                    line: lineno,
                    query_id,
                    error,
                };
                serde_json::to_writer(&mut out, &entry)?;
                out.write_all(b"\n").map_err(io_err(&path))?;
            }
        }
    }
    out.flush().map_err(io_err(&path))?;
    eprintln!(
        "score: {} records, {} responses, {} failures -> {}",
        summary.records,
        summary.responses,
        summary.failures,
        path.display()
    );
    Ok(summary)
}

fn build_environment(cfg: &RunConfig, world: WorldData) -> Result<Environment> {
    if world.queries.is_empty() {
        return Err(Error::Config(
            "no queries: set `queries` or generate a world".into(),
        ));
    }
    let emb = embeddings(cfg, &world)?;
    Environment::new(world.catalog, emb, world.queries, cfg.max_response_length)
}

fn csv_appender(path: &Path, header: &[&str], append: bool) -> Result<csv::Writer<File>> {
    let exists = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    if !exists {
        w.write_record(header)?;
        w.flush().map_err(io_err(path))?;
    }
    Ok(w)
}

pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["category", "total", "correct", "accuracy"])?;
    w.write_record([
        "all".to_string(),
        report.total.to_string(),
        report.correct.to_string(),
        report.accuracy.to_string(),
    ])?;
    for c in &report.per_category {
        w.write_record([
            c.category.to_string(),
            c.total.to_string(),
            c.correct.to_string(),
            c.accuracy.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub out_dir: PathBuf,
    pub world_hash: String,
    pub stop: Option<StopReason>,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    /// Accuracy of the best policy on the test split.
    pub test: EvalReport,
    pub epochs_completed: usize,
}

/// Full training run into `cfg.out_dir`, optionally resuming from a
/// checkpoint written by an earlier run with the same configuration.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let resumed = resume.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resumed {
        if ck.resume_hash != cfg.resume_hash() {
            return Err(Error::Validation(
                "checkpoint was written under a different configuration".into(),
            ));
        }
        if ck.state.is_none() {
            return Err(Error::Validation(
                "checkpoint carries no trainer state".into(),
            ));
        }
    }
    let world = load_or_generate(cfg)?;
    let world_hash = world.hash();
    let dir = cfg.out_dir.clone();
    let ck_dir = dir.join(CHECKPOINT_DIR);
    create_dir(&ck_dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.canonical()).map_err(io_err(&dir.join(CONFIG_FILE)))?;
    if world.generated && resumed.is_none() {
        world.write(&dir, cfg.interactions_header)?;
    }
    let env = build_environment(cfg, world)?;
    let tcfg = cfg.trainer();
    let (config_hash, resume_hash) = (cfg.hash(), cfg.resume_hash());
    let save = |name: &str, state: &qrec_core::TrainerState, policy: &LogLinearPolicy| {
        Checkpoint::from_state(state, policy, config_hash.clone(), resume_hash.clone())
            .save(&ck_dir.join(name))
    };

    let mut trainer = match resumed {
        Some(ck) => Trainer::resume(&env, tcfg, ck.state.expect("checked above"))?,
        None => {
            let t = Trainer::new(&env, tcfg, LogLinearPolicy::zeros(env.spec))?;
            save("initial.json", t.state(), &t.state().policy)?;
            t
        }
    };
    let append = resume.is_some();
    let mut metrics = csv_appender(&dir.join(METRICS_FILE), &METRICS_HEADER, append)?;
    let mut schedule = csv_appender(&dir.join(SCHEDULE_FILE), &SCHEDULE_HEADER, append)?;

    while let Some(epoch) = trainer.run_epoch()? {
        for row in &epoch.rows {
            metrics.write_record(row.to_record())?;
        }
        epoch.schedule.write_schedule_rows(&mut schedule)?;
        metrics.flush().map_err(io_err(&dir.join(METRICS_FILE)))?;
        schedule.flush().map_err(io_err(&dir.join(SCHEDULE_FILE)))?;
        let st = trainer.state();
        save(&format!("epoch_{:03}.json", epoch.epoch), st, &st.policy)?;
        save("latest.json", st, &st.policy)?;
        eprintln!(
            "train: epoch {} scheduled {} (dropped {}) validation accuracy {:.4}{}",
            epoch.epoch,
            epoch.schedule.retained(),
            epoch.schedule.filtered(),
            epoch.validation.accuracy,
            if epoch.improved { " *" } else { "" }
        );
    }
    let st = trainer.state();
    save("latest.json", st, &st.policy)?;
    save("best.json", st, &st.best_policy)?;

    let held_out = if trainer.split().test.is_empty() {
        &trainer.split().validation
    } else {
        &trainer.split().test
    };
    let test = if held_out.is_empty() {
        evaluate(&st.best_policy, &trainer.contexts(&trainer.split().train))?
    } else {
        evaluate(&st.best_policy, &trainer.contexts(held_out))?
    };
    write_eval_csv(&dir.join(EVAL_FILE), &test)?;

    let mut manifest = Manifest::new("train", cfg, world_hash.clone());
    for f in [CONFIG_FILE, METRICS_FILE, SCHEDULE_FILE, EVAL_FILE] {
        manifest.record_file(&dir, f)?;
    }
    let stop_name = st
        .stop
        .map(|s| serde_json::to_value(s).expect("serializes"));
    manifest
        .results
        .insert("stop".into(), stop_name.unwrap_or_default());
    manifest
        .results
        .insert("best_epoch".into(), st.best_epoch.into());
    manifest
        .results
        .insert("best_validation_accuracy".into(), st.best_accuracy.into());
    manifest
        .results
        .insert("test_accuracy".into(), test.accuracy.into());
    manifest.write(&dir)?;
    eprintln!(
        "train: stopped ({:?}) after {} epochs; best epoch {} test accuracy {:.4}",
        st.stop, st.epochs_completed, st.best_epoch, test.accuracy
    );
    Ok(TrainReport {
        out_dir: dir,
        world_hash,
        stop: st.stop,
        best_epoch: st.best_epoch,
        best_validation_accuracy: st.best_accuracy,
        test,
        epochs_completed: st.epochs_completed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum EvalSplit {
    /// Every query in the dataset.
    #[default]
    All,
    /// The held-out test split implied by the configured seed and fractions.
    Test,
}

/// Greedy accuracy of a checkpoint, overall and per category.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: EvalSplit) -> Result<EvalReport> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let env = build_environment(cfg, load_or_generate(cfg)?)?;
    let policy = ck.policy_for(&env.spec)?;
    let indices: Vec<usize> = match split {
        EvalSplit::All => (0..env.len()).collect(),
        EvalSplit::Test => {
            qrec_core::trainer::DataSplit::new(
                env.len(),
                cfg.validation_fraction,
                cfg.test_fraction,
                cfg.seed,
            )?
            .test
        }
    };
    let contexts: Vec<_> = indices.iter().map(|&i| &env.contexts[i]).collect();
    let report = evaluate(&policy, &contexts)?;
    create_dir(&cfg.out_dir)?;
    write_eval_csv(&cfg.out_dir.join(EVAL_FILE), &report)?;
    println!(
        "accuracy {:.4} ({}/{})",
        report.accuracy, report.correct, report.total
    );
    for c in &report.per_category {
        println!(
            "  {:<12} {:.4} ({}/{})",
            c.category.as_str(),
            c.accuracy,
            c.correct,
            c.total
        );
    }
    Ok(report)
}

pub const DEFAULT_SWEEP: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub w_penalty: f64,
    pub final_accuracy: f64,
    pub world_hash: String,
}

fn sweep_dir_name(w: f64) -> String {
    format!("w_penalty_{w}")
}

/// One full training run per penalty weight on a shared world and seed.
pub fn cmd_sweep(cfg: &RunConfig, values: &[f64]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut seen = BTreeSet::new();
    let mut weights = Vec::with_capacity(values.len());
    for &v in values {
        if !seen.insert(v.to_bits()) {
            return Err(Error::Config(format!("duplicate sweep value {v}")));
        }
        weights.push(PenaltyWeight::from_config(v)?);
    }
    create_dir(&cfg.out_dir)?;
    let mut rows = Vec::with_capacity(weights.len());
    for w in weights {
        let run = RunConfig {
            w_penalty: w,
            out_dir: cfg.out_dir.join(sweep_dir_name(w.value())),
            ..cfg.clone()
        };
        eprintln!("sweep: w_penalty = {}", w.value());
        let report = cmd_train(&run, None)?;
        rows.push(SweepRow {
            w_penalty: w.value(),
            final_accuracy: report.test.accuracy,
            world_hash: report.world_hash,
        });
    }
    if rows.iter().any(|r| r.world_hash != rows[0].world_hash) {
        return Err(Error::Invariant("sweep runs saw different worlds".into()));
    }
    let path = cfg.out_dir.join(SWEEP_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["w_penalty", "final_accuracy"])?;
    for r in &rows {
        w.write_record([r.w_penalty.to_string(), r.final_accuracy.to_string()])?;
    }
    w.flush().map_err(io_err(&path))?;
    let mut manifest = Manifest::new("sweep", cfg, rows[0].world_hash.clone());
    manifest.record_file(&cfg.out_dir, SWEEP_FILE)?;
    manifest.write(&cfg.out_dir)?;
    Ok(rows)
}
