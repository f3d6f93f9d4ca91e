//! Rollouts, clipped group-relative updates, evaluation and the epoch loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{
    analyze_response, raae_group, GroupAdvantages, PenaltyWeight, SegmentedResponse,
};
use crate::curriculum::{CurriculumState, EpochDataset};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::Catalog;
use crate::objective::{surrogate_sums, SurrogateSums, Tempered, TokenTerm};
use crate::policy::{Decoding, LogLinearPolicy, PolicySpec, QueryContext, Response};
use crate::reward::{extract_answer, RewardWeights};
use crate::seed::{derive_seed, rng_for};
use crate::synth::{Category, QueryInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
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
    pub seed: u64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let w = RewardWeights::default();
        TrainerConfig {
            learning_rate: 0.05,
            group_size: 5,
            clip_epsilon: 0.2,
            kl_coefficient: 0.01,
            temperature: 1.0,
            batch_size: 16,
            max_response_length: 5,
            inner_updates: 2,
            w_penalty: PenaltyWeight::default(),
            w1: w.w1,
            w2: w.w2,
            tau: 0.1,
            seed: 0,
            max_epochs: 15,
            patience: 1,
            validation_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            ));
        }
        if !(self.kl_coefficient.is_finite() && self.kl_coefficient >= 0.0) {
            return bad(format!(
                "kl_coefficient must be >= 0, got {}",
                self.kl_coefficient
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if self.batch_size == 0 || self.inner_updates == 0 {
            return bad("batch_size and inner_updates must be >= 1".into());
        }
        if self.max_response_length < 3 {
            return bad(format!(
                "max_response_length must be >= 3, got {}",
                self.max_response_length
            ));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        let fractions = [self.validation_fraction, self.test_fraction];
        if fractions.iter().any(|f| !(0.0..1.0).contains(f)) || fractions.iter().sum::<f64>() >= 1.0
        {
            return bad(
                "validation_fraction and test_fraction must be in [0, 1) and sum below 1".into(),
            );
        }
        self.reward_weights().validate()
    }

    pub fn reward_weights(&self) -> RewardWeights {
        RewardWeights {
            w1: self.w1,
            w2: self.w2,
            ..RewardWeights::default()
        }
    }
}

/// Catalog, embeddings and queries with precomputed policy contexts.
#[derive(Clone, Debug)]
pub struct Environment {
    pub catalog: Catalog,
    pub embeddings: EmbeddingTable,
    pub queries: Vec<QueryInstance>,
    pub contexts: Vec<QueryContext>,
    pub spec: PolicySpec,
}

impl Environment {
    pub fn new(
        catalog: Catalog,
        embeddings: EmbeddingTable,
        queries: Vec<QueryInstance>,
        max_response_length: usize,
    ) -> Result<Self> {
        let first = queries
            .first()
            .ok_or_else(|| Error::Config("dataset has no queries".into()))?;
        if embeddings.len() != catalog.len() {
            return Err(Error::Validation(format!(
                "embedding table has {} rows for {} catalog items",
                embeddings.len(),
                catalog.len()
            )));
        }
        let spec = PolicySpec::new(first.candidates.len(), max_response_length)?;
        let mut seen = std::collections::BTreeSet::new();
        for q in &queries {
            if !seen.insert(q.query_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate query id `{}`",
                    q.query_id
                )));
            }
        }
        let contexts = queries
            .iter()
            .map(|q| {
                if !q.candidates.contains(&q.ground_truth) {
                    return Err(Error::InvalidInstance {
                        query_id: q.query_id.clone(),
                        message: "ground truth is not a candidate".into(),
                    });
                }
                QueryContext::build(q, &catalog, &spec)
            })
            .collect::<Result<_>>()?;
        Ok(Environment {
            catalog,
            embeddings,
            queries,
            contexts,
            spec,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Query indices partitioned into train, validation and test sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DataSplit {
    pub fn new(n: usize, validation_fraction: f64, test_fraction: f64, seed: u64) -> Result<Self> {
        let n_val = (n as f64 * validation_fraction).round() as usize;
        let n_test = (n as f64 * test_fraction).round() as usize;
        if n_val + n_test >= n {
            return Err(Error::Config(format!(
                "{n} queries leave no training data after the split"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(seed, "split", &[]));
        let mut test = idx.split_off(n - n_test);
        let mut validation = idx.split_off(idx.len() - n_val);
        idx.sort_unstable();
        validation.sort_unstable();
        test.sort_unstable();
        Ok(DataSplit {
            train: idx,
            validation,
            test,
        })
    }
}

/// Produces one response text per query.
pub trait Recommender {
    fn respond(&self, ctx: &QueryContext, position: usize) -> String;
}

impl Recommender for LogLinearPolicy {
    fn respond(&self, ctx: &QueryContext, _position: usize) -> String {
        self.greedy(ctx).text
    }
}

/// Boxes a uniformly random candidate.
#[derive(Clone, Copy, Debug)]
pub struct UniformRecommender {
    pub seed: u64,
}

impl Recommender for UniformRecommender {
    fn respond(&self, ctx: &QueryContext, position: usize) -> String {
        let slot = rng_for(self.seed, "uniform-recommender", &[position as u64])
            .random_range(0..ctx.titles.len());
        format!("Answer: \\boxed{{{}}}", ctx.titles[slot])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub category: Category,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_category: Vec<CategoryAccuracy>,
}

pub fn evaluate<R: Recommender + Sync>(
    recommender: &R,
    contexts: &[&QueryContext],
) -> Result<EvalReport> {
    if contexts.is_empty() {
        return Err(Error::Evaluation(
            "cannot evaluate on an empty query set".into(),
        ));
    }
    let hits: Vec<bool> = contexts
        .par_iter()
        .enumerate()
        .map(|(i, ctx)| {
            let text = recommender.respond(ctx, i);
            extract_answer(&text, &ctx.candidates).item.as_ref() == Some(&ctx.ground_truth)
        })
        .collect();
    let mut counts = [[0usize; 2]; 3];
    for (ctx, &hit) in contexts.iter().zip(&hits) {
        let c = &mut counts[ctx.category.index()];
        c[0] += 1;
        c[1] += hit as usize;
    }
    let correct = hits.iter().filter(|&&h| h).count();
    Ok(EvalReport {
        total: contexts.len(),
        correct,
        accuracy: correct as f64 / contexts.len() as f64,
        per_category: Category::ALL
            .iter()
            .zip(counts)
            .filter(|(_, [t, _])| *t > 0)
            .map(|(&category, [total, correct])| CategoryAccuracy {
                category,
                total,
                correct,
                accuracy: correct as f64 / total as f64,
            })
            .collect(),
    })
}

/// G scored responses to one query.
#[derive(Clone, Debug)]
pub struct GroupRollout {
    pub query: usize,
    pub responses: Vec<Response>,
    pub analyzed: Vec<SegmentedResponse>,
    pub segment_rewards: Vec<Vec<f64>>,
    pub advantages: GroupAdvantages,
}

impl GroupRollout {
    pub fn rewards(&self) -> Vec<f64> {
        self.analyzed.iter().map(|a| a.shaped.total).collect()
    }
}

/// Rollouts for a batch of queries under one frozen snapshot.
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub snapshot: LogLinearPolicy,
    pub temperature: f64,
    pub groups: Vec<GroupRollout>,
}

impl RolloutBatch {
    pub fn token_count(&self) -> usize {
        self.groups
            .iter()
            .flat_map(|g| &g.responses)
            .map(|r| r.tokens.len())
            .sum()
    }
}

pub fn rollout_group(
    policy: &LogLinearPolicy,
    env: &Environment,
    query: usize,
    config: &TrainerConfig,
    seed: u64,
) -> Result<GroupRollout> {
    let ctx = &env.contexts[query];
    let responses = policy.sample_responses(
        ctx,
        config.group_size,
        Decoding::Sample {
            temperature: config.temperature,
        },
        seed,
    );
    let weights = config.reward_weights();
    let analyzed = responses
        .iter()
        .map(|r| {
            analyze_response(
                &r.text,
                Some(&r.token_spans),
                &ctx.candidates,
                &ctx.ground_truth,
                &env.catalog,
                &env.embeddings,
                &weights,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let (segment_rewards, advantages) = raae_group(&analyzed, &ctx.ground_truth, config.w_penalty)?;
    Ok(GroupRollout {
        query,
        responses,
        analyzed,
        segment_rewards,
        advantages,
    })
}

/// Samples and scores a batch in parallel. Seeds derive from
/// `(root, epoch, query)` so results do not depend on worker count.
pub fn collect_rollouts(
    policy: &LogLinearPolicy,
    env: &Environment,
    queries: &[usize],
    config: &TrainerConfig,
    epoch: usize,
) -> Result<RolloutBatch> {
    let groups = queries
        .par_iter()
        .map(|&q| {
            let seed = derive_seed(config.seed, "rollout", &[epoch as u64, q as u64]);
            rollout_group(policy, env, q, config, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutBatch {
        snapshot: policy.clone(),
        temperature: config.temperature,
        groups,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerMetrics {
    pub loss: f64,
    pub objective: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Means over the inner updates.
    pub loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub mean_abs_advantage: f64,
    pub mean_reward: f64,
    pub inner: Vec<InnerMetrics>,
}

/// Gradient steps on `−J + β·KL` against the batch snapshot.
pub fn train_step(
    policy: &mut LogLinearPolicy,
    batch: &RolloutBatch,
    config: &TrainerConfig,
) -> Result<StepMetrics> {
    if policy.spec() != batch.snapshot.spec() {
        return Err(Error::Training(
            "batch snapshot and policy have different layouts".into(),
        ));
    }
    let mut terms: Vec<Vec<TokenTerm<'_>>> = Vec::with_capacity(batch.groups.len());
    let mut abs_adv = 0.0;
    let mut rewards = 0.0;
    let mut responses = 0usize;
    for g in &batch.groups {
        let mut group_terms = Vec::new();
        for (r, adv) in g.responses.iter().zip(&g.advantages.advantages) {
            if adv.len() != r.tokens.len() {
                return Err(Error::Invariant(format!(
                    "query {}: {} advantages for {} tokens",
                    g.query,
                    adv.len(),
                    r.tokens.len()
                )));
            }
            for ((step, &lp), &a) in r.steps.iter().zip(&r.log_probs).zip(adv) {
                abs_adv += a.abs();
                group_terms.push(TokenTerm {
                    step,
                    old_log_prob: lp,
                    ref_log_prob: lp,
                    advantage: a,
                });
            }
        }
        rewards += g.analyzed.iter().map(|a| a.shaped.total).sum::<f64>();
        responses += g.responses.len();
        terms.push(group_terms);
    }
    let tokens: usize = terms.iter().map(Vec::len).sum();
    if tokens == 0 {
        return Err(Error::Training("batch has no tokens".into()));
    }

    let mut inner = Vec::with_capacity(config.inner_updates);
    for k in 0..config.inner_updates {
        let model = Tempered {
            policy,
            temperature: batch.temperature,
        };
        let partial: Vec<SurrogateSums> = terms
            .par_iter()
            .map(|t| surrogate_sums(&model, t, config.clip_epsilon, config.kl_coefficient))
            .collect();
        let mut sums = SurrogateSums::zeros(policy.weights().len());
        for p in &partial {
            sums.merge(p);
        }
        let value = sums.finish(config.kl_coefficient);
        if !value.loss.is_finite() || value.loss_grad.iter().any(|g| !g.is_finite()) {
            let bad = value.loss_grad.iter().filter(|g| !g.is_finite()).count();
            return Err(Error::Training(format!(
                "non-finite loss or gradient at inner step {k}: loss={}, kl={}, {bad} non-finite gradient entries",
                value.loss, value.kl
            )));
        }
        for (w, g) in policy.weights_mut().iter_mut().zip(&value.loss_grad) {
            *w -= config.learning_rate * g;
        }
        inner.push(InnerMetrics {
            loss: value.loss,
            objective: value.objective,
            kl: value.kl,
            clip_fraction: value.clip_fraction,
        });
    }
    let n = inner.len() as f64;
    Ok(StepMetrics {
        loss: inner.iter().map(|m| m.loss).sum::<f64>() / n,
        kl: inner.iter().map(|m| m.kl).sum::<f64>() / n,
        clip_fraction: inner.iter().map(|m| m.clip_fraction).sum::<f64>() / n,
        mean_abs_advantage: abs_adv / tokens as f64,
        mean_reward: rewards / responses as f64,
        inner,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub mean_reward: f64,
    /// Validation accuracy, on the last step of an epoch.
    pub accuracy: Option<f64>,
}

pub const METRICS_HEADER: [&str; 7] = [
    "epoch",
    "step",
    "loss",
    "kl",
    "clip_frac",
    "mean_reward",
    "accuracy",
];

impl MetricRow {
    pub fn to_record(&self) -> [String; 7] {
        [
            self.epoch.to_string(),
            self.step.to_string(),
            self.loss.to_string(),
            self.kl.to_string(),
            self.clip_frac.to_string(),
            self.mean_reward.to_string(),
            self.accuracy.map(|a| a.to_string()).unwrap_or_default(),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    Converged,
}

/// Everything needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub policy: LogLinearPolicy,
    pub best_policy: LogLinearPolicy,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub stale_epochs: usize,
    pub epochs_completed: usize,
    pub global_step: usize,
    pub curriculum: CurriculumState,
    pub stop: Option<StopReason>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub schedule: EpochDataset,
    pub rows: Vec<MetricRow>,
    pub validation: EvalReport,
    pub improved: bool,
}

pub struct Trainer<'a> {
    env: &'a Environment,
    config: TrainerConfig,
    split: DataSplit,
    state: TrainerState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        env: &'a Environment,
        config: TrainerConfig,
        policy: LogLinearPolicy,
    ) -> Result<Self> {
        config.validate()?;
        if policy.spec() != &env.spec {
            return Err(Error::Config(
                "policy layout does not match the environment".into(),
            ));
        }
        let split = DataSplit::new(
            env.len(),
            config.validation_fraction,
            config.test_fraction,
            config.seed,
        )?;
        let ids: Vec<String> = split
            .train
            .iter()
            .map(|&i| env.queries[i].query_id.clone())
            .collect();
        let curriculum = CurriculumState::new(&ids, config.tau, config.seed)?;
        let best_accuracy = Self::validation_accuracy(env, &split, &policy)?;
        let stop = (config.max_epochs == 0).then_some(StopReason::MaxEpochs);
        Ok(Trainer {
            env,
            split,
            state: TrainerState {
                best_policy: policy.clone(),
                policy,
                best_accuracy,
                best_epoch: 0,
                stale_epochs: 0,
                epochs_completed: 0,
                global_step: 0,
                curriculum,
                stop,
            },
            config,
        })
    }

    pub fn resume(
        env: &'a Environment,
        config: TrainerConfig,
        mut state: TrainerState,
    ) -> Result<Self> {
        config.validate()?;
        if state.policy.spec() != &env.spec || state.best_policy.spec() != &env.spec {
            return Err(Error::Config(
                "checkpoint policy layout does not match the environment".into(),
            ));
        }
        let split = DataSplit::new(
            env.len(),
            config.validation_fraction,
            config.test_fraction,
            config.seed,
        )?;
        if state.epochs_completed >= config.max_epochs && state.stop.is_none() {
            state.stop = Some(StopReason::MaxEpochs);
        } else if state.stop == Some(StopReason::MaxEpochs)
            && state.epochs_completed < config.max_epochs
        {
            state.stop = None;
        }
        Ok(Trainer {
            env,
            config,
            split,
            state,
        })
    }

    fn validation_accuracy(
        env: &Environment,
        split: &DataSplit,
        policy: &LogLinearPolicy,
    ) -> Result<f64> {
        if split.validation.is_empty() {
            return Ok(0.0);
        }
        let ctxs: Vec<_> = split.validation.iter().map(|&i| &env.contexts[i]).collect();
        Ok(evaluate(policy, &ctxs)?.accuracy)
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn split(&self) -> &DataSplit {
        &self.split
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.state.stop
    }

    pub fn contexts(&self, indices: &[usize]) -> Vec<&'a QueryContext> {
        indices.iter().map(|&i| &self.env.contexts[i]).collect()
    }

    /// Trains one curriculum epoch. Returns `None` once the run has stopped.
    pub fn run_epoch(&mut self) -> Result<Option<EpochSummary>> {
        if self.state.stop.is_some() {
            return Ok(None);
        }
        let schedule = self.state.curriculum.current.clone();
        if schedule.converged() {
            self.state.stop = Some(StopReason::Converged);
            return Ok(None);
        }
        let index: BTreeMap<&str, usize> = self
            .env
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.query_id.as_str(), i))
            .collect();
        let order = schedule
            .query_ids()
            .map(|q| {
                index.get(q).copied().ok_or_else(|| {
                    Error::Curriculum(format!("scheduled query `{q}` is not in the dataset"))
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let epoch = schedule.epoch;
        let mut log = BTreeMap::new();
        let mut rows = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch = collect_rollouts(&self.state.policy, self.env, chunk, &self.config, epoch)?;
            for g in &batch.groups {
                log.insert(self.env.queries[g.query].query_id.clone(), g.rewards());
            }
            let m = train_step(&mut self.state.policy, &batch, &self.config)?;
            self.state.global_step += 1;
            rows.push(MetricRow {
                epoch,
                step: self.state.global_step,
                loss: m.loss,
                kl: m.kl,
                clip_frac: m.clip_fraction,
                mean_reward: m.mean_reward,
                accuracy: None,
            });
        }
        self.state.curriculum.update(&log)?;

        let validation = if self.split.validation.is_empty() {
            evaluate(&self.state.policy, &self.contexts(&self.split.train))?
        } else {
            evaluate(&self.state.policy, &self.contexts(&self.split.validation))?
        };
        if let Some(last) = rows.last_mut() {
            last.accuracy = Some(validation.accuracy);
        }
        let improved = validation.accuracy > self.state.best_accuracy;
        if improved {
            self.state.best_accuracy = validation.accuracy;
            self.state.best_policy = self.state.policy.clone();
            self.state.best_epoch = epoch;
            self.state.stale_epochs = 0;
        } else {
            self.state.stale_epochs += 1;
        }
        self.state.epochs_completed += 1;
        if self.config.patience > 0 && self.state.stale_epochs >= self.config.patience {
            self.state.stop = Some(StopReason::EarlyStop);
        } else if self.state.epochs_completed >= self.config.max_epochs {
            self.state.stop = Some(StopReason::MaxEpochs);
        } else if self.state.curriculum.current.converged() {
            self.state.stop = Some(StopReason::Converged);
        }
        Ok(Some(EpochSummary {
            epoch,
            schedule,
            rows,
            validation,
            improved,
        }))
    }
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    /// Policy with the best validation accuracy (the initial one if no
    /// epoch improved on it).
    pub policy: LogLinearPolicy,
    pub epochs: Vec<EpochSummary>,
    pub stop: StopReason,
    pub state: TrainerState,
}

impl TrainingOutcome {
    pub fn metric_rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.epochs.iter().flat_map(|e| &e.rows)
    }
}

pub fn train(env: &Environment, config: &TrainerConfig) -> Result<TrainingOutcome> {
    let mut trainer = Trainer::new(env, config.clone(), LogLinearPolicy::zeros(env.spec))?;
    let mut epochs = Vec::new();
    while let Some(e) = trainer.run_epoch()? {
        epochs.push(e);
    }
    let state = trainer.into_state();
    Ok(TrainingOutcome {
        policy: state.best_policy.clone(),
        stop: state.stop.unwrap_or(StopReason::MaxEpochs),
        epochs,
        state,
    })
}
