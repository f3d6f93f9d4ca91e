//! Log-linear autoregressive policy over a small response grammar.
//!
//! A response considers up to `max_considers` candidates, one paragraph
//! each, then commits to an answer:
//!
//! ```text
//! (SLOT)* ANSWER SLOT END
//! ```
//!
//! rendered as `Considering <title>.\n\n` per considered slot followed by
//! `Answer: \boxed{<title>}`. Tokens outside the grammar are masked out of
//! the softmax, so every sampled response is well formed; a forced token
//! has log-probability exactly 0.
//!
//! Logits are `z = Wᵀφ(context)` for a sparse binary feature vector φ built
//! from the query category, the decoding state, a two-token history window,
//! the number of paragraphs so far, and per-candidate indicators of which
//! query constraints the candidate satisfies. Candidate indicators feed only
//! their own candidate's token, through weights shared across slots, so a
//! lesson learned at one list position transfers to every other.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Attribute, Catalog, ItemId};
use crate::reward::CandidateSet;
use crate::seed::sha256_hex;
use crate::synth::{Category, QueryInstance};

const STATES: usize = 3;
const SLOT_STATES: usize = 2;
const CATEGORIES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub num_slots: usize,
    pub max_considers: usize,
    /// Leading query constraints that get their own candidate indicator.
    pub constraint_slots: usize,
    /// Leading evidence items that get their own candidate indicator.
    pub evidence_slots: usize,
}

impl PolicySpec {
    pub fn new(num_slots: usize, max_response_length: usize) -> Result<Self> {
        if num_slots < 2 {
            return Err(Error::Config(format!(
                "policy needs >= 2 candidate slots, got {num_slots}"
            )));
        }
        if max_response_length < 3 {
            return Err(Error::Config(format!(
                "max response length must be >= 3 (ANSWER SLOT END), got {max_response_length}"
            )));
        }
        Ok(PolicySpec {
            num_slots,
            max_considers: max_response_length - 3,
            constraint_slots: 2,
            evidence_slots: 2,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.num_slots + 2
    }

    pub fn answer_token(&self) -> u32 {
        self.num_slots as u32
    }

    pub fn end_token(&self) -> u32 {
        self.num_slots as u32 + 1
    }

    pub fn max_response_length(&self) -> usize {
        self.max_considers + 3
    }

    fn checks(&self) -> usize {
        self.constraint_slots + self.evidence_slots
    }

    fn state_offset(&self) -> usize {
        1
    }

    fn prev1_offset(&self) -> usize {
        self.state_offset() + STATES * CATEGORIES
    }

    fn prev2_offset(&self) -> usize {
        self.prev1_offset() + self.vocab_size() + 1
    }

    fn depth_offset(&self) -> usize {
        self.prev2_offset() + self.vocab_size() + 1
    }

    fn slot_offset(&self) -> usize {
        self.depth_offset() + self.max_considers + 1
    }

    /// Features shared by every vocabulary entry (rows of `W`).
    pub fn context_feature_count(&self) -> usize {
        self.slot_offset()
    }

    /// Candidate indicators per slot; their weights are shared by all slots.
    pub fn candidate_feature_count(&self) -> usize {
        CATEGORIES * SLOT_STATES * self.checks()
    }

    /// Size of the feature id space.
    pub fn feature_count(&self) -> usize {
        self.slot_offset() + self.num_slots * self.candidate_feature_count()
    }

    /// `W` (context features × vocabulary) followed by the shared candidate
    /// weights.
    pub fn param_count(&self) -> usize {
        self.context_feature_count() * self.vocab_size() + self.candidate_feature_count()
    }

    fn candidate_feature(&self, category: usize, state: usize, check: usize) -> usize {
        (category * SLOT_STATES + state) * self.checks() + check
    }

    fn slot_feature(&self, slot: usize, category: usize, state: usize, check: usize) -> u32 {
        (self.slot_offset()
            + slot * self.candidate_feature_count()
            + self.candidate_feature(category, state, check)) as u32
    }

    /// Parameter linking `feature` to the logit of `token`, if any. A
    /// candidate indicator only reaches its own slot's token.
    pub fn weight_index(&self, feature: usize, token: usize) -> Option<usize> {
        match feature.checked_sub(self.slot_offset()) {
            None => Some(feature * self.vocab_size() + token),
            Some(k) => {
                let c = self.candidate_feature_count();
                (k / c == token).then(|| self.context_feature_count() * self.vocab_size() + k % c)
            }
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("spec serializes")
                .as_bytes(),
        )
    }
}

/// Everything the policy and the reward need to know about one query.
#[derive(Clone, Debug)]
pub struct QueryContext {
    pub query_id: String,
    pub category: Category,
    pub ground_truth: ItemId,
    pub candidates: CandidateSet,
    /// Display titles by slot.
    pub titles: Vec<String>,
    /// Bit k set when the candidate satisfies the k-th stated constraint;
    /// bit `constraint_slots + j` when it shares a value of the
    /// evidence-linked relation with the j-th evidence item.
    pub slot_checks: Vec<u8>,
}

impl QueryContext {
    pub fn build(instance: &QueryInstance, catalog: &Catalog, spec: &PolicySpec) -> Result<Self> {
        if instance.candidates.len() != spec.num_slots {
            return Err(Error::Validation(format!(
                "query `{}` has {} candidates but the policy expects {}",
                instance.query_id,
                instance.candidates.len(),
                spec.num_slots
            )));
        }
        let candidates = CandidateSet::new(catalog, &instance.candidates)?;
        let evidence_values: Vec<BTreeSet<&str>> =
            match instance.constraints.iter().find(|c| c.evidence) {
                Some(c) => instance
                    .evidence
                    .iter()
                    .take(spec.evidence_slots)
                    .map(|id| {
                        Ok(catalog
                            .graph()
                            .values_of(catalog.index_of(id)?, &c.relation)
                            .collect())
                    })
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            };
        let linked = instance
            .constraints
            .iter()
            .find(|c| c.evidence)
            .map(|c| c.relation.as_str());
        let stated: Vec<Option<Attribute>> = instance
            .constraints
            .iter()
            .take(spec.constraint_slots)
            .map(|c| c.value.as_ref().map(|v| Attribute::new(&c.relation, v)))
            .collect();
        let slot_checks = (0..spec.num_slots)
            .map(|s| {
                let item = candidates.index(s);
                let attrs = catalog.graph().attributes(item);
                let mut bits = 0u8;
                for (k, a) in stated.iter().enumerate() {
                    if a.as_ref().is_some_and(|a| attrs.contains(a)) {
                        bits |= 1 << k;
                    }
                }
                if let Some(rel) = linked {
                    for (j, vals) in evidence_values.iter().enumerate() {
                        if catalog
                            .graph()
                            .values_of(item, rel)
                            .any(|v| vals.contains(v))
                        {
                            bits |= 1 << (spec.constraint_slots + j);
                        }
                    }
                }
                bits
            })
            .collect();
        Ok(QueryContext {
            query_id: instance.query_id.clone(),
            category: instance.category,
            ground_truth: instance.ground_truth.clone(),
            titles: (0..spec.num_slots)
                .map(|s| catalog.item(candidates.index(s)).title.clone())
                .collect(),
            candidates,
            slot_checks,
        })
    }
}

/// Tokens permitted at a decoding step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Legal {
    SlotsOrAnswer,
    Slots,
    Only(u32),
}

impl Legal {
    pub fn contains(self, token: u32, spec: &PolicySpec) -> bool {
        match self {
            Legal::SlotsOrAnswer => token <= spec.answer_token(),
            Legal::Slots => token < spec.answer_token(),
            Legal::Only(t) => token == t,
        }
    }

    fn count(self, spec: &PolicySpec) -> usize {
        match self {
            Legal::SlotsOrAnswer => spec.num_slots + 1,
            Legal::Slots => spec.num_slots,
            Legal::Only(_) => 1,
        }
    }
}

/// One decoding decision: active features, permitted tokens and the token
/// taken.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    pub features: Vec<u32>,
    pub legal: Legal,
    pub action: u32,
}

/// Features and legal set for the next token after `prefix`.
pub fn step_context(spec: &PolicySpec, ctx: &QueryContext, prefix: &[u32]) -> (Vec<u32>, Legal) {
    let answer = spec.answer_token();
    let answered = prefix.iter().position(|&t| t == answer);
    let (state, legal) = match answered {
        Some(p) if p + 1 == prefix.len() => (1, Legal::Slots),
        Some(_) => (2, Legal::Only(spec.end_token())),
        None if prefix.len() >= spec.max_considers => (0, Legal::Only(answer)),
        None => (0, Legal::SlotsOrAnswer),
    };
    if let Legal::Only(_) = legal {
        return (Vec::new(), legal);
    }
    let cat = ctx.category.index();
    let bos = spec.vocab_size() as u32;
    let prev1 = prefix.last().copied().unwrap_or(bos);
    let prev2 = if prefix.len() >= 2 {
        prefix[prefix.len() - 2]
    } else {
        bos
    };
    let depth = answered.unwrap_or(prefix.len()).min(spec.max_considers);
    let mut f = vec![
        0,
        (spec.state_offset() + state * CATEGORIES + cat) as u32,
        spec.prev1_offset() as u32 + prev1,
        spec.prev2_offset() as u32 + prev2,
        (spec.depth_offset() + depth) as u32,
    ];
    for (s, &bits) in ctx.slot_checks.iter().enumerate() {
        for k in 0..spec.checks() {
            if bits & (1 << k) != 0 {
                f.push(spec.slot_feature(s, cat, state, k));
            }
        }
    }
    (f, legal)
}

/// Step inputs for an existing token sequence; rejects tokens outside the
/// vocabulary or the grammar.
pub fn trajectory_steps(
    spec: &PolicySpec,
    ctx: &QueryContext,
    tokens: &[u32],
) -> Result<Vec<StepInput>> {
    let mut steps = Vec::with_capacity(tokens.len());
    for (t, &action) in tokens.iter().enumerate() {
        if action as usize >= spec.vocab_size() {
            return Err(Error::Evaluation(format!(
                "token {action} at position {t} is out of vocabulary"
            )));
        }
        let (features, legal) = step_context(spec, ctx, &tokens[..t]);
        if !legal.contains(action, spec) {
            return Err(Error::Evaluation(format!(
                "token {action} at position {t} is not permitted here"
            )));
        }
        steps.push(StepInput {
            features,
            legal,
            action,
        });
    }
    Ok(steps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLinearPolicy {
    spec: PolicySpec,
    weights: Vec<f64>,
}

impl LogLinearPolicy {
    pub fn zeros(spec: PolicySpec) -> Self {
        LogLinearPolicy {
            weights: vec![0.0; spec.param_count()],
            spec,
        }
    }

    pub fn from_weights(spec: PolicySpec, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != spec.param_count() {
            return Err(Error::Validation(format!(
                "expected {} weights, got {}",
                spec.param_count(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Validation("policy weights must be finite".into()));
        }
        Ok(LogLinearPolicy { spec, weights })
    }

    /// Hand-set weights that answer every well-formed synthetic query
    /// correctly under greedy decoding.
    pub fn scripted_oracle(spec: PolicySpec) -> Self {
        let mut p = Self::zeros(spec);
        let v = spec.vocab_size();
        let (e1, e2) = (spec.constraint_slots, spec.constraint_slots + 1);
        let plan: [(Category, &[(usize, f64)]); 3] = [
            (Category::Explicit, &[(0, 10.0), (1, 10.0)]),
            (Category::Implicit, &[(0, 10.0), (e1, 5.0), (e2, 5.0)]),
            (
                Category::Misinformed,
                &[(0, 10.0), (1, -10.0), (e1, 5.0), (e2, 5.0)],
            ),
        ];
        for (cat, checks) in plan {
            let c = cat.index();
            p.weights[(spec.state_offset() + c) * v + spec.answer_token() as usize] = 100.0;
            for &(k, w) in checks {
                let f = spec.slot_feature(0, c, 1, k) as usize;
                p.weights[spec.weight_index(f, 0).expect("own slot")] = w;
            }
        }
        p
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn legal_tokens(&self, legal: Legal) -> Range<u32> {
        match legal {
            Legal::SlotsOrAnswer => 0..self.spec.answer_token() + 1,
            Legal::Slots => 0..self.spec.answer_token(),
            Legal::Only(t) => t..t + 1,
        }
    }

    /// Temperature-scaled logits over the legal tokens, in token order.
    fn scaled_logits(&self, features: &[u32], legal: Legal, temperature: f64) -> Vec<f64> {
        let v = self.spec.vocab_size();
        let range = self.legal_tokens(legal);
        let mut z = vec![0.0; legal.count(&self.spec)];
        let context = self.spec.context_feature_count();
        for &f in features {
            let f = f as usize;
            if f < context {
                let row = &self.weights[f * v..(f + 1) * v];
                for (zi, w) in z
                    .iter_mut()
                    .zip(&row[range.start as usize..range.end as usize])
                {
                    *zi += w;
                }
            } else {
                let slot = (f - context) / self.spec.candidate_feature_count();
                if range.contains(&(slot as u32)) {
                    let k = self.spec.weight_index(f, slot).expect("own slot");
                    z[slot - range.start as usize] += self.weights[k];
                }
            }
        }
        for zi in &mut z {
            *zi /= temperature;
        }
        z
    }

    fn log_softmax(z: &mut [f64]) {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for x in z {
            *x -= lse;
        }
    }

    /// Log-probabilities of the legal tokens (first legal token first).
    pub fn step_log_probs(&self, features: &[u32], legal: Legal, temperature: f64) -> Vec<f64> {
        if let Legal::Only(_) = legal {
            return vec![0.0];
        }
        let mut z = self.scaled_logits(features, legal, temperature);
        Self::log_softmax(&mut z);
        z
    }

    pub fn step_log_prob(&self, step: &StepInput, temperature: f64) -> f64 {
        if let Legal::Only(_) = step.legal {
            return 0.0;
        }
        let lp = self.step_log_probs(&step.features, step.legal, temperature);
        lp[(step.action - self.legal_tokens(step.legal).start) as usize]
    }

    /// Adds `coeff * ∂ log π(action) / ∂W` into `grad`.
    pub fn add_log_prob_grad(
        &self,
        step: &StepInput,
        temperature: f64,
        coeff: f64,
        grad: &mut [f64],
    ) {
        if coeff == 0.0 {
            return;
        }
        if let Legal::Only(_) = step.legal {
            return;
        }
        let v = self.spec.vocab_size();
        let range = self.legal_tokens(step.legal);
        let lp = self.step_log_probs(&step.features, step.legal, temperature);
        let scale = coeff / temperature;
        let delta: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let indicator = if range.start + j as u32 == step.action {
                    1.0
                } else {
                    0.0
                };
                scale * (indicator - l.exp())
            })
            .collect();
        let context = self.spec.context_feature_count();
        for &f in &step.features {
            let f = f as usize;
            if f < context {
                let row = &mut grad[f * v + range.start as usize..f * v + range.end as usize];
                for (g, d) in row.iter_mut().zip(&delta) {
                    *g += d;
                }
            } else {
                let slot = (f - context) / self.spec.candidate_feature_count();
                if range.contains(&(slot as u32)) {
                    let k = self.spec.weight_index(f, slot).expect("own slot");
                    grad[k] += delta[slot - range.start as usize];
                }
            }
        }
    }

    pub fn log_prob(
        &self,
        ctx: &QueryContext,
        tokens: &[u32],
        temperature: f64,
    ) -> Result<Vec<f64>> {
        Ok(trajectory_steps(&self.spec, ctx, tokens)?
            .iter()
            .map(|s| self.step_log_prob(s, temperature))
            .collect())
    }

    /// Decodes one response with `rng` driving the categorical draws.
    fn decode(&self, ctx: &QueryContext, decoding: Decoding, rng: &mut ChaCha8Rng) -> Response {
        let mut tokens = Vec::with_capacity(self.spec.max_response_length());
        let mut log_probs = Vec::with_capacity(self.spec.max_response_length());
        let mut steps = Vec::with_capacity(self.spec.max_response_length());
        let temperature = decoding.temperature();
        let mut terminated = false;
        while tokens.len() < self.spec.max_response_length() {
            let (features, legal) = step_context(&self.spec, ctx, &tokens);
            let lp = self.step_log_probs(&features, legal, temperature);
            let j = match decoding {
                Decoding::Greedy => {
                    let mut best = 0;
                    for (k, &x) in lp.iter().enumerate() {
                        if x > lp[best] {
                            best = k;
                        }
                    }
                    best
                }
                Decoding::Sample { .. } => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = lp.len() - 1;
                    for (k, &x) in lp.iter().enumerate() {
                        acc += x.exp();
                        if u < acc {
                            pick = k;
                            break;
                        }
                    }
                    pick
                }
            };
            let action = self.legal_tokens(legal).start + j as u32;
            tokens.push(action);
            log_probs.push(lp[j]);
            steps.push(StepInput {
                features,
                legal,
                action,
            });
            if action == self.spec.end_token() {
                terminated = true;
                break;
            }
        }
        let (text, token_spans) = render_response(&self.spec, ctx, &tokens);
        Response {
            tokens,
            log_probs,
            text,
            token_spans,
            terminated,
            steps,
        }
    }

    /// Samples `g` responses; deterministic given `seed`.
    pub fn sample_responses(
        &self,
        ctx: &QueryContext,
        g: usize,
        decoding: Decoding,
        seed: u64,
    ) -> Vec<Response> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..g)
            .map(|_| self.decode(ctx, decoding, &mut rng))
            .collect()
    }

    pub fn greedy(&self, ctx: &QueryContext) -> Response {
        self.decode(ctx, Decoding::Greedy, &mut ChaCha8Rng::seed_from_u64(0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64 },
}

impl Decoding {
    /// Temperature used for recorded log-probabilities (1 when greedy).
    pub fn temperature(self) -> f64 {
        match self {
            Decoding::Greedy => 1.0,
            Decoding::Sample { temperature } => temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub tokens: Vec<u32>,
    pub log_probs: Vec<f64>,
    pub text: String,
    pub token_spans: Vec<Range<usize>>,
    pub terminated: bool,
    pub steps: Vec<StepInput>,
}

/// Text rendering of a token sequence and the byte span of each token.
pub fn render_response(
    spec: &PolicySpec,
    ctx: &QueryContext,
    tokens: &[u32],
) -> (String, Vec<Range<usize>>) {
    let mut text = String::new();
    let mut spans = Vec::with_capacity(tokens.len());
    let mut answered = false;
    for &t in tokens {
        let start = text.len();
        if t == spec.answer_token() {
            text.push_str("Answer: \\boxed{");
            answered = true;
        } else if t == spec.end_token() {
            text.push('}');
        } else if let Some(title) = ctx.titles.get(t as usize) {
            if answered {
                text.push_str(title);
            } else {
                text.push_str("Considering ");
                text.push_str(title);
                text.push_str(".\n\n");
            }
        }
        spans.push(start..text.len());
    }
    (text, spans)
}
