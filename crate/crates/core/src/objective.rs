//! Clipped surrogate objective and KL penalty with analytic gradients.

use crate::policy::{LogLinearPolicy, StepInput};

/// Anything that scores a decoding step and differentiates its log-prob.
pub trait LogProbModel {
    fn param_count(&self) -> usize;
    fn log_prob(&self, step: &StepInput) -> f64;
    /// Adds `coeff * ∂ log π(step.action) / ∂θ` into `grad`.
    fn add_log_prob_grad(&self, step: &StepInput, coeff: f64, grad: &mut [f64]);
}

/// A policy evaluated at a fixed sampling temperature.
#[derive(Clone, Copy, Debug)]
pub struct Tempered<'a> {
    pub policy: &'a LogLinearPolicy,
    pub temperature: f64,
}

impl LogProbModel for Tempered<'_> {
    fn param_count(&self) -> usize {
        self.policy.weights().len()
    }

    fn log_prob(&self, step: &StepInput) -> f64 {
        self.policy.step_log_prob(step, self.temperature)
    }

    fn add_log_prob_grad(&self, step: &StepInput, coeff: f64, grad: &mut [f64]) {
        self.policy
            .add_log_prob_grad(step, self.temperature, coeff, grad);
    }
}

/// `min(h·A, clip(h, 1−ε, 1+ε)·A)`.
pub fn clipped_term(h: f64, a: f64, epsilon: f64) -> f64 {
    (h * a).min(h.clamp(1.0 - epsilon, 1.0 + epsilon) * a)
}

/// True when the clipped branch is selected and the term is flat in h.
pub fn clip_active(h: f64, a: f64, epsilon: f64) -> bool {
    (a > 0.0 && h > 1.0 + epsilon) || (a < 0.0 && h < 1.0 - epsilon)
}

/// `exp(Δ) − Δ − 1` with `Δ = log π_ref − log π_θ`.
pub fn kl_term(delta: f64) -> f64 {
    delta.exp_m1() - delta
}

/// One token of the batch.
#[derive(Clone, Copy, Debug)]
pub struct TokenTerm<'a> {
    pub step: &'a StepInput,
    /// Log-prob under the rollout snapshot (π_old).
    pub old_log_prob: f64,
    /// Log-prob under the KL reference.
    pub ref_log_prob: f64,
    pub advantage: f64,
}

/// Unnormalized sums over a slice of tokens; merge partial sums in a fixed
/// order, then call [`SurrogateSums::finish`].
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateSums {
    pub objective: f64,
    pub kl: f64,
    pub clipped: usize,
    pub tokens: usize,
    /// Gradient of `−Σ clipped + β Σ kl`.
    pub loss_grad: Vec<f64>,
}

impl SurrogateSums {
    pub fn zeros(params: usize) -> Self {
        SurrogateSums {
            objective: 0.0,
            kl: 0.0,
            clipped: 0,
            tokens: 0,
            loss_grad: vec![0.0; params],
        }
    }

    pub fn merge(&mut self, other: &SurrogateSums) {
        self.objective += other.objective;
        self.kl += other.kl;
        self.clipped += other.clipped;
        self.tokens += other.tokens;
        for (g, o) in self.loss_grad.iter_mut().zip(&other.loss_grad) {
            *g += o;
        }
    }

    pub fn finish(mut self, beta: f64) -> SurrogateValue {
        let n = self.tokens.max(1) as f64;
        for g in &mut self.loss_grad {
            *g /= n;
        }
        let objective = self.objective / n;
        let kl = self.kl / n;
        SurrogateValue {
            objective,
            kl,
            loss: -objective + beta * kl,
            clip_fraction: self.clipped as f64 / n,
            tokens: self.tokens,
            loss_grad: self.loss_grad,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateValue {
    pub objective: f64,
    pub kl: f64,
    /// `−objective + β·kl`.
    pub loss: f64,
    pub clip_fraction: f64,
    pub tokens: usize,
    pub loss_grad: Vec<f64>,
}

pub fn surrogate_sums<M: LogProbModel>(
    model: &M,
    terms: &[TokenTerm<'_>],
    epsilon: f64,
    beta: f64,
) -> SurrogateSums {
    let mut s = SurrogateSums::zeros(model.param_count());
    for t in terms {
        let logp = model.log_prob(t.step);
        let h = (logp - t.old_log_prob).exp();
        let delta = t.ref_log_prob - logp;
        s.objective += clipped_term(h, t.advantage, epsilon);
        s.kl += kl_term(delta);
        s.tokens += 1;
        let d_obj = if clip_active(h, t.advantage, epsilon) {
            s.clipped += 1;
            0.0
        } else {
            h * t.advantage
        };
        // d/dlogπ of exp(Δ) − Δ − 1 is 1 − exp(Δ).
        let d_kl = -delta.exp_m1();
        model.add_log_prob_grad(t.step, -d_obj + beta * d_kl, &mut s.loss_grad);
    }
    s
}

/// Mean clipped objective, mean KL and the gradient of the loss
/// `−J + β·KL` over every token.
pub fn surrogate<M: LogProbModel>(
    model: &M,
    terms: &[TokenTerm<'_>],
    epsilon: f64,
    beta: f64,
) -> SurrogateValue {
    surrogate_sums(model, terms, epsilon, beta).finish(beta)
}
