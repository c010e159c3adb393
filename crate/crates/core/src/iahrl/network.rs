use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::lattice::{ImaginedBehavior, PlannerState};
use super::IahrlError;
use crate::geometry::Pose2D;

/// Ten waypoints × (x, y, speed).
pub const FEATURE_DIM: usize = 30;
const WAYPOINTS: usize = 10;
const POSITION_SCALE: f64 = 20.0;
const SPEED_SCALE: f64 = 10.0;

/// Waypoints subsampled evenly from the behavior, in the ego frame.
pub fn behavior_features(b: &ImaginedBehavior, ego: &Pose2D) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    let h = b.samples.len();
    if h == 0 {
        return f;
    }
    for k in 0..WAYPOINTS {
        let idx = ((k + 1) * h / WAYPOINTS).max(1) - 1;
        let s = &b.samples[idx];
        let local = ego.inverse_transform(s.pose.position());
        f[3 * k] = local.x / POSITION_SCALE;
        f[3 * k + 1] = local.y / POSITION_SCALE;
        f[3 * k + 2] = s.speed / SPEED_SCALE;
    }
    f
}

/// Per-episode random input to the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedVector {
    pub values: Vec<f64>,
}

impl SeedVector {
    pub fn draw<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            values: (0..dim).map(|_| StandardNormal.sample(rng)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub d_seed: usize,
    pub hidden: usize,
    pub n_actions: usize,
    /// Divide attention scores by √d_model.
    pub scaled: bool,
    /// Skip the hidden nonlinearity; only for gradient probes.
    pub bypass_tanh: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_seed: 8,
            hidden: 64,
            n_actions: 42,
            scaled: true,
            bypass_tanh: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), IahrlError> {
        if self.d_model == 0 || self.hidden == 0 || self.n_actions == 0 {
            return Err(IahrlError::InvalidConfig(
                "d_model, hidden and n_actions must be positive",
            ));
        }
        Ok(())
    }

    /// Tensor names and (rows, cols), in storage order. Biases have one column.
    pub fn layout(&self) -> Vec<(&'static str, usize, usize)> {
        let (d, h, k) = (self.d_model, self.hidden, self.n_actions + 1);
        vec![
            ("enc.w", d, FEATURE_DIM),
            ("enc.b", d, 1),
            ("q.w", d, d + self.d_seed),
            ("q.b", d, 1),
            ("k.w", d, d),
            ("k.b", d, 1),
            ("v.w", d, d),
            ("v.b", d, 1),
            ("h1.w", h, d),
            ("h1.b", h, 1),
            ("out.w", k, h),
            ("out.b", k, 1),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, r, c)| r * c).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    enc_w: usize,
    enc_b: usize,
    q_w: usize,
    q_b: usize,
    k_w: usize,
    k_b: usize,
    v_w: usize,
    v_b: usize,
    h_w: usize,
    h_b: usize,
    o_w: usize,
    o_b: usize,
}

impl Offsets {
    fn of(cfg: &PolicyConfig) -> Self {
        let mut at = 0;
        let o: Vec<usize> = cfg
            .layout()
            .iter()
            .map(|(_, r, c)| {
                let start = at;
                at += r * c;
                start
            })
            .collect();
        Self {
            enc_w: o[0],
            enc_b: o[1],
            q_w: o[2],
            q_b: o[3],
            k_w: o[4],
            k_b: o[5],
            v_w: o[6],
            v_b: o[7],
            h_w: o[8],
            h_b: o[9],
            o_w: o[10],
            o_b: o[11],
        }
    }
}

/// `y = W x + b` with `W` row-major `rows × x.len()`.
fn affine(p: &[f64], w: usize, b: usize, rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            let row = &p[w + r * cols..w + (r + 1) * cols];
            p[b + r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// Accumulates `dW += dy ⊗ x`, `db += dy` and returns `Wᵀ dy`.
fn affine_back(p: &[f64], g: &mut [f64], w: usize, b: usize, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let cols = x.len();
    let mut dx = vec![0.0; cols];
    for (r, &d) in dy.iter().enumerate() {
        g[b + r] += d;
        let base = w + r * cols;
        for c in 0..cols {
            g[base + c] += d * x[c];
            dx[c] += d * p[base + c];
        }
    }
    dx
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub features: Vec<[f64; FEATURE_DIM]>,
    pub encoded: Vec<Vec<f64>>,
    pub query_input: Vec<f64>,
    pub query: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub m: Vec<f64>,
    pub hidden: Vec<f64>,
    /// Action logits followed by the value estimate.
    pub out: Vec<f64>,
}

impl Forward {
    pub fn logits(&self) -> &[f64] {
        &self.out[..self.out.len() - 1]
    }

    pub fn value(&self) -> f64 {
        self.out[self.out.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub index: usize,
    pub log_prob: f64,
    pub value: f64,
    /// Selection probabilities; exactly zero where masked.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPolicy {
    pub config: PolicyConfig,
    pub params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    config: PolicyConfig,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

const MODEL_FORMAT: &str = "airside-attention-policy";
const MODEL_VERSION: u32 = 1;

impl AttentionPolicy {
    /// Uniform fan-in initialization with a zero output layer, so the initial
    /// policy is uniform over feasible candidates and the value is zero.
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self, IahrlError> {
        let mut p = Self::random(config, rng)?;
        let o = Offsets::of(&config);
        p.params[o.o_w..].iter_mut().for_each(|x| *x = 0.0);
        Ok(p)
    }

    /// Every tensor drawn at random, biases included.
    pub fn random<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self, IahrlError> {
        config.validate()?;
        let mut params = Vec::with_capacity(config.param_count());
        for (name, rows, cols) in config.layout() {
            let fan_in = if name.ends_with(".b") { config.d_model } else { cols };
            let bound = (1.0 / fan_in as f64).sqrt();
            params.extend((0..rows * cols).map(|_| rng.random_range(-bound..bound)));
        }
        Ok(Self { config, params })
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let (start, len) = self.tensor_range(name)?;
        Some(&self.params[start..start + len])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let (start, len) = self.tensor_range(name)?;
        Some(&mut self.params[start..start + len])
    }

    fn tensor_range(&self, name: &str) -> Option<(usize, usize)> {
        let mut at = 0;
        for (n, r, c) in self.config.layout() {
            if n == name {
                return Some((at, r * c));
            }
            at += r * c;
        }
        None
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn forward(&self, state: &PlannerState, seed: &SeedVector) -> Result<Forward, IahrlError> {
        state.validate()?;
        if seed.values.len() != self.config.d_seed {
            return Err(IahrlError::InvalidConfig(
                "seed vector dimension does not match the policy",
            ));
        }
        // ego frame at the first imagined sample
        let Some(origin) = state.ego_behavior.samples.first().map(|s| s.pose) else {
            return Err(IahrlError::InconsistentHorizon);
        };
        let features: Vec<[f64; FEATURE_DIM]> = state.behaviors().map(|b| behavior_features(b, &origin)).collect();
        Ok(self.forward_features(features, seed))
    }

    pub fn forward_features(&self, features: Vec<[f64; FEATURE_DIM]>, seed: &SeedVector) -> Forward {
        let (cfg, p, o) = (&self.config, &self.params, Offsets::of(&self.config));
        let d = cfg.d_model;
        let encoded: Vec<Vec<f64>> = features.iter().map(|f| affine(p, o.enc_w, o.enc_b, d, f)).collect();
        let mut query_input = encoded[0].clone();
        query_input.extend_from_slice(&seed.values);
        let query = affine(p, o.q_w, o.q_b, d, &query_input);
        let keys: Vec<Vec<f64>> = encoded.iter().map(|e| affine(p, o.k_w, o.k_b, d, e)).collect();
        let values: Vec<Vec<f64>> = encoded.iter().map(|e| affine(p, o.v_w, o.v_b, d, e)).collect();
        let scale = self.score_scale();
        let scores: Vec<f64> = keys.iter().map(|k| scale * dot(&query, k)).collect();
        let weights = softmax(&scores);
        let mut m = vec![0.0; d];
        for (a, v) in weights.iter().zip(&values) {
            for (mi, vi) in m.iter_mut().zip(v) {
                *mi += a * vi;
            }
        }
        let mut hidden = affine(p, o.h_w, o.h_b, cfg.hidden, &m);
        if !cfg.bypass_tanh {
            hidden.iter_mut().for_each(|x| *x = x.tanh());
        }
        let out = affine(p, o.o_w, o.o_b, cfg.n_actions + 1, &hidden);
        Forward {
            features,
            encoded,
            query_input,
            query,
            keys,
            values,
            weights,
            m,
            hidden,
            out,
        }
    }

    fn score_scale(&self) -> f64 {
        if self.config.scaled {
            1.0 / (self.config.d_model as f64).sqrt()
        } else {
            1.0
        }
    }

    /// Attention read-out `m_t` and the weights over ego-then-surrounding.
    pub fn attention(&self, state: &PlannerState, seed: &SeedVector) -> Result<(Vec<f64>, Vec<f64>), IahrlError> {
        let f = self.forward(state, seed)?;
        Ok((f.m, f.weights))
    }

    /// Adds the gradient of `dout · out` with respect to the parameters to `grad`.
    pub fn backward(&self, fwd: &Forward, dout: &[f64], grad: &mut [f64]) {
        let (cfg, p, o) = (&self.config, &self.params, Offsets::of(&self.config));
        let d = cfg.d_model;
        let dh = affine_back(p, grad, o.o_w, o.o_b, &fwd.hidden, dout);
        let dz: Vec<f64> = if cfg.bypass_tanh {
            dh
        } else {
            dh.iter().zip(&fwd.hidden).map(|(g, h)| g * (1.0 - h * h)).collect()
        };
        let dm = affine_back(p, grad, o.h_w, o.h_b, &fwd.m, &dz);
        let n = fwd.weights.len();
        let da: Vec<f64> = fwd.values.iter().map(|v| dot(&dm, v)).collect();
        let mean: f64 = fwd.weights.iter().zip(&da).map(|(a, g)| a * g).sum();
        let scale = self.score_scale();
        let mut dq = vec![0.0; d];
        let mut de = vec![vec![0.0; d]; n];
        for i in 0..n {
            let ds = fwd.weights[i] * (da[i] - mean) * scale;
            for c in 0..d {
                dq[c] += ds * fwd.keys[i][c];
            }
            let dk: Vec<f64> = fwd.query.iter().map(|q| ds * q).collect();
            let dv: Vec<f64> = dm.iter().map(|g| fwd.weights[i] * g).collect();
            let from_k = affine_back(p, grad, o.k_w, o.k_b, &fwd.encoded[i], &dk);
            let from_v = affine_back(p, grad, o.v_w, o.v_b, &fwd.encoded[i], &dv);
            for c in 0..d {
                de[i][c] += from_k[c] + from_v[c];
            }
        }
        let from_q = affine_back(p, grad, o.q_w, o.q_b, &fwd.query_input, &dq);
        for c in 0..d {
            de[0][c] += from_q[c];
        }
        for (i, g) in de.iter().enumerate() {
            affine_back(p, grad, o.enc_w, o.enc_b, &fwd.features[i], g);
        }
    }

    /// Chooses among the candidates allowed by `mask`. Greedy ties go to the
    /// lowest index.
    pub fn act<R: Rng + ?Sized>(
        &self,
        state: &PlannerState,
        seed: &SeedVector,
        mask: &[bool],
        mode: ActMode,
        rng: &mut R,
    ) -> Result<Action, IahrlError> {
        let f = self.forward(state, seed)?;
        self.act_from(&f, mask, mode, rng)
    }

    pub fn act_from<R: Rng + ?Sized>(
        &self,
        f: &Forward,
        mask: &[bool],
        mode: ActMode,
        rng: &mut R,
    ) -> Result<Action, IahrlError> {
        if mask.len() != self.config.n_actions {
            return Err(IahrlError::InvalidConfig("mask length does not match the action count"));
        }
        let probs = masked_softmax(f.logits(), mask).ok_or(IahrlError::NoFeasibleBehavior)?;
        let index = match mode {
            ActMode::Greedy => {
                let mut best = None;
                for (i, &l) in f.logits().iter().enumerate() {
                    if mask[i] && best.is_none_or(|(_, b)| l > b) {
                        best = Some((i, l));
                    }
                }
                best.map(|(i, _)| i).ok_or(IahrlError::NoFeasibleBehavior)?
            }
            ActMode::Sample => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = None;
                for (i, &pr) in probs.iter().enumerate() {
                    if pr > 0.0 {
                        acc += pr;
                        pick = Some(i);
                        if u < acc {
                            break;
                        }
                    }
                }
                pick.ok_or(IahrlError::NoFeasibleBehavior)?
            }
        };
        Ok(Action {
            index,
            log_prob: probs[index].ln(),
            value: f.value(),
            probs,
        })
    }

    pub fn to_json(&self) -> String {
        let mut at = 0;
        let tensors = self
            .config
            .layout()
            .into_iter()
            .map(|(name, r, c)| {
                let values = self.params[at..at + r * c].to_vec();
                at += r * c;
                TensorRecord {
                    name: name.to_string(),
                    shape: [r, c],
                    values,
                }
            })
            .collect();
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            config: self.config,
            tensors,
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, IahrlError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| IahrlError::InvalidModel(e.to_string()))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(IahrlError::InvalidModel(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        file.config.validate()?;
        let layout = file.config.layout();
        if layout.len() != file.tensors.len() {
            return Err(IahrlError::InvalidModel("wrong tensor count".into()));
        }
        let mut params = Vec::with_capacity(file.config.param_count());
        for ((name, r, c), t) in layout.into_iter().zip(file.tensors) {
            if t.name != name || t.shape != [r, c] || t.values.len() != r * c {
                return Err(IahrlError::InvalidModel(format!(
                    "tensor {} does not match {name} [{r}, {c}]",
                    t.name
                )));
            }
            params.extend(t.values);
        }
        let p = Self {
            config: file.config,
            params,
        };
        if !p.is_finite() {
            return Err(IahrlError::InvalidModel("non-finite parameter".into()));
        }
        Ok(p)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Softmax over the unmasked entries, exact zeros elsewhere.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Option<Vec<f64>> {
    let m = logits
        .iter()
        .zip(mask)
        .filter(|(_, &ok)| ok)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return None;
    }
    let e: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, &ok)| if ok { (l - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    Some(e.into_iter().map(|v| v / z).collect())
}

/// Largest relative error between the analytic and the central-difference
/// gradient of the summed logits, over every parameter. The denominator is
/// floored at 1 so that near-zero entries are compared absolutely.
pub fn gradient_check(policy: &AttentionPolicy, state: &PlannerState, seed: &SeedVector) -> Result<f64, IahrlError> {
    const H: f64 = 1e-6;
    let probe = |p: &AttentionPolicy| -> Result<f64, IahrlError> { Ok(p.forward(state, seed)?.logits().iter().sum()) };
    let fwd = policy.forward(state, seed)?;
    let mut dout = vec![1.0; policy.config.n_actions + 1];
    dout[policy.config.n_actions] = 0.0;
    let mut grad = vec![0.0; policy.params.len()];
    policy.backward(&fwd, &dout, &mut grad);
    let mut work = policy.clone();
    let mut worst: f64 = 0.0;
    for i in 0..grad.len() {
        let orig = work.params[i];
        work.params[i] = orig + H;
        let up = probe(&work)?;
        work.params[i] = orig - H;
        let down = probe(&work)?;
        work.params[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iahrl::lattice::BehaviorSample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn behavior(x0: f64, y0: f64, v: f64) -> ImaginedBehavior {
        ImaginedBehavior {
            samples: (1..=30)
                .map(|k| BehaviorSample {
                    t: k as f64 * 0.2,
                    pose: Pose2D::new(x0 + v * 0.2 * k as f64, y0, 0.0),
                    speed: v,
                })
                .collect(),
            terminal_lateral_offset: 0.0,
            terminal_speed: v,
            rule_cost: 0.0,
            feasible: true,
        }
    }

    #[test]
    fn singleton_attention_returns_ego_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionPolicy::random(PolicyConfig::default(), &mut rng).unwrap();
        let state = PlannerState {
            ego_behavior: behavior(0.0, 0.0, 5.0),
            surrounding: vec![],
        };
        let seed = SeedVector::draw(8, &mut rng);
        let f = p.forward(&state, &seed).unwrap();
        assert_eq!(f.weights, vec![1.0]);
        assert_eq!(f.m, f.values[0]);
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionPolicy::new(PolicyConfig::default(), &mut rng).unwrap();
        let state = PlannerState {
            ego_behavior: behavior(0.0, 0.0, 5.0),
            surrounding: vec![behavior(10.0, 3.0, 2.0)],
        };
        let seed = SeedVector::draw(8, &mut rng);
        let mut mask = vec![true; 42];
        mask[3] = false;
        let a = p.act(&state, &seed, &mask, ActMode::Greedy, &mut rng).unwrap();
        assert_eq!(a.index, 0);
        assert_eq!(a.value, 0.0);
        assert_eq!(a.probs[3], 0.0);
        assert!((a.log_prob + 41f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn model_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionPolicy::random(PolicyConfig::default(), &mut rng).unwrap();
        let q = AttentionPolicy::from_json(&p.to_json()).unwrap();
        assert_eq!(p, q);
        let broken = p.to_json().replace("\"enc.b\"", "\"enc.c\"");
        assert!(AttentionPolicy::from_json(&broken).is_err());
    }
}
