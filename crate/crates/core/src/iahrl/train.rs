use serde::{Deserialize, Serialize};

use super::network::{masked_softmax, ActMode, AttentionPolicy};
use super::IahrlError;
use crate::par::{map_indexed, Execution};
use crate::sim::episode::{run_episode, EpisodeOutcome, PolicyChooser, RecordedDecision, StackConfig};
use crate::sim::scenario::{generate_scenario, ScenarioKind, ScenarioParams};
use crate::sim::SimError;

/// Advantage actor-critic with Monte Carlo returns. One environment step is
/// one policy decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub kind: ScenarioKind,
    pub params: ScenarioParams,
    pub seed: u64,
    /// Upper bound on training episodes.
    pub episodes: usize,
    /// Upper bound on environment steps.
    pub max_env_steps: usize,
    pub batch: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub entropy_bonus: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub step_reward: f64,
    /// Multiplies the normalized rule cost of each choice.
    pub cost_penalty: f64,
    pub success_reward: f64,
    pub failure_reward: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Intersection,
            params: ScenarioParams::default(),
            seed: 0,
            episodes: 3000,
            max_env_steps: 200_000,
            batch: 16,
            gamma: 0.99,
            learning_rate: 1e-3,
            entropy_bonus: 0.01,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            step_reward: -0.01,
            cost_penalty: 0.1,
            success_reward: 1.0,
            failure_reward: -1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), IahrlError> {
        if self.batch == 0 {
            return Err(IahrlError::InvalidConfig("batch must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(IahrlError::InvalidConfig("gamma must lie in [0, 1]"));
        }
        let finite = [
            self.learning_rate,
            self.entropy_bonus,
            self.value_coef,
            self.max_grad_norm,
            self.step_reward,
            self.cost_penalty,
            self.success_reward,
            self.failure_reward,
        ];
        if finite.iter().any(|v| !v.is_finite()) || self.learning_rate < 0.0 || !(self.max_grad_norm > 0.0) {
            return Err(IahrlError::InvalidConfig(
                "hyperparameters must be finite, learning rate >= 0",
            ));
        }
        Ok(())
    }

    /// Scenario seed of training episode `i`.
    pub fn episode_seed(&self, i: usize) -> u64 {
        splitmix(self.seed ^ splitmix(i as u64))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRow {
    pub update: usize,
    pub episodes: usize,
    pub env_steps: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: AttentionPolicy,
    pub curve: Vec<LearningRow>,
    pub episodes: usize,
    pub env_steps: usize,
}

impl TrainOutput {
    pub fn curve_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.curve {
            w.serialize(r).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }
}

struct EpisodeGrad {
    grad: Vec<f64>,
    loss: f64,
    decisions: usize,
    ret: f64,
    outcome: EpisodeOutcome,
}

/// Loss gradient of one episode's decisions, summed.
fn episode_gradient(
    policy: &AttentionPolicy,
    chooser: &PolicyChooser,
    decisions: &[RecordedDecision],
    outcome: EpisodeOutcome,
    cfg: &TrainConfig,
) -> Result<EpisodeGrad, IahrlError> {
    let n = decisions.len();
    let mut rewards: Vec<f64> = decisions
        .iter()
        .map(|d| cfg.step_reward - cfg.cost_penalty * d.normalized_cost)
        .collect();
    if let Some(last) = rewards.last_mut() {
        *last += if outcome == EpisodeOutcome::Success {
            cfg.success_reward
        } else {
            cfg.failure_reward
        };
    }
    let mut returns = vec![0.0; n];
    let mut g = 0.0;
    for i in (0..n).rev() {
        g = rewards[i] + cfg.gamma * g;
        returns[i] = g;
    }
    let k = policy.config.n_actions;
    let mut grad = vec![0.0; policy.params.len()];
    let mut loss = 0.0;
    for (d, &ret) in decisions.iter().zip(&returns) {
        let f = policy.forward(&d.state, &chooser.seed)?;
        let probs = masked_softmax(f.logits(), &d.mask).ok_or(IahrlError::NoFeasibleBehavior)?;
        let value = f.value();
        let adv = ret - value;
        let entropy: f64 = -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        loss += -adv * probs[d.action].ln() - cfg.entropy_bonus * entropy + cfg.value_coef * adv * adv;
        let mut dout = vec![0.0; k + 1];
        for j in 0..k {
            if !d.mask[j] {
                continue;
            }
            let p = probs[j];
            let onehot = if j == d.action { 1.0 } else { 0.0 };
            dout[j] = -adv * (onehot - p) + cfg.entropy_bonus * p * (p.ln() + entropy);
        }
        dout[k] = 2.0 * cfg.value_coef * (value - ret);
        policy.backward(&f, &dout, &mut grad);
    }
    Ok(EpisodeGrad {
        grad,
        loss,
        decisions: n,
        ret: returns.first().copied().unwrap_or(0.0),
        outcome,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - Self::B1.powi(self.t), 1.0 - Self::B2.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains `initial` on freshly generated scenarios, `batch` episodes per
/// update. Episodes run concurrently; their gradients are summed in episode
/// order, so the result does not depend on the worker count.
pub fn train(
    initial: AttentionPolicy,
    stack: &StackConfig,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutput, SimError> {
    cfg.validate()?;
    let k = stack.lattice.candidate_count(
        generate_scenario(cfg.kind, &cfg.params, cfg.episode_seed(0))?
            .ego
            .limits
            .v_max,
    );
    if k != initial.config.n_actions {
        return Err(IahrlError::InvalidConfig("policy action count does not match the lattice").into());
    }
    let mut policy = initial;
    let mut adam = Adam {
        m: vec![0.0; policy.params.len()],
        v: vec![0.0; policy.params.len()],
        t: 0,
    };
    let mut curve = Vec::new();
    let (mut episodes, mut env_steps) = (0, 0);
    while episodes < cfg.episodes && env_steps < cfg.max_env_steps {
        let batch = cfg.batch.min(cfg.episodes - episodes);
        let current = &policy;
        let results = map_indexed(batch, exec, |b| -> Result<EpisodeGrad, SimError> {
            let seed = cfg.episode_seed(episodes + b);
            let sc = generate_scenario(cfg.kind, &cfg.params, seed)?;
            let mut chooser = PolicyChooser::new(current, ActMode::Sample, splitmix(seed));
            chooser.record = true;
            let r = run_episode(&sc, stack, &mut chooser)?;
            let decisions = std::mem::take(&mut chooser.decisions);
            Ok(episode_gradient(current, &chooser, &decisions, r.outcome, cfg)?)
        });
        let mut grad = vec![0.0; policy.params.len()];
        let (mut loss, mut n_dec, mut ret, mut succ, mut coll) = (0.0, 0, 0.0, 0, 0);
        for r in results {
            let r = r?;
            for (g, x) in grad.iter_mut().zip(&r.grad) {
                *g += x;
            }
            loss += r.loss;
            n_dec += r.decisions;
            ret += r.ret;
            succ += usize::from(r.outcome == EpisodeOutcome::Success);
            coll += usize::from(r.outcome == EpisodeOutcome::Collision);
        }
        episodes += batch;
        env_steps += n_dec;
        let update = curve.len();
        let scale = 1.0 / n_dec.max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        loss *= scale;
        if !loss.is_finite() || !norm.is_finite() {
            return Err(IahrlError::DivergedTraining {
                update,
                reason: format!("loss {loss}, gradient norm {norm}"),
            }
            .into());
        }
        if norm > cfg.max_grad_norm {
            let c = cfg.max_grad_norm / norm;
            grad.iter_mut().for_each(|g| *g *= c);
        }
        if n_dec > 0 {
            adam.step(&mut policy.params, &grad, cfg.learning_rate);
        }
        if !policy.is_finite() {
            return Err(IahrlError::DivergedTraining {
                update,
                reason: "non-finite parameter after update".into(),
            }
            .into());
        }
        curve.push(LearningRow {
            update,
            episodes,
            env_steps,
            mean_return: ret / batch as f64,
            success_rate: succ as f64 / batch as f64,
            collision_rate: coll as f64 / batch as f64,
            loss,
            grad_norm: norm,
        });
    }
    Ok(TrainOutput {
        policy,
        curve,
        episodes,
        env_steps,
    })
}
