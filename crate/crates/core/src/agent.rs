//! Prediction-augmented PPO: the observation is extended with forecast user
//! positions, the actor emits per-dimension Beta parameters so raw actions
//! live in [0, 1] without clipping, advantages come from generalized
//! advantage estimation, and updates use the clipped surrogate objective.


use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::env::{Action, Arena, WbanEnv};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Linear};
use crate::predictor::Predictor;
use crate::tape::{NodeId, Tape, Var};
use crate::tensor::Tensor;

/// PPO hyper-parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub hidden: usize,
    pub epochs_per_update: usize,
    pub minibatch_size: usize,
    pub rollout_length: usize,
    pub episodes: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            discount: 0.98,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            learning_rate: 1e-3,
            hidden: 128,
            epochs_per_update: 10,
            minibatch_size: 64,
            rollout_length: 2048,
            episodes: 500,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.discount && self.discount <= 1.0) {
            return Err(Error::config(format!("discount {} outside (0, 1]", self.discount)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config(format!("gae lambda {} outside [0, 1]", self.gae_lambda)));
        }
        if self.clip_epsilon <= 0.0 {
            return Err(Error::config("clip epsilon must be positive".to_string()));
        }
        Ok(())
    }
}

/// On-policy transition store, cleared after every update.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub terminals: Vec<bool>,
    pub capacity: usize,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        RolloutBuffer {
            capacity,
            ..RolloutBuffer::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.len() >= self.capacity
    }

    pub fn push(
        &mut self,
        state: Vec<f64>,
        action: Vec<f64>,
        log_prob: f64,
        reward: f64,
        value: f64,
        terminal: bool,
    ) {
        self.states.push(state);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.terminals.push(terminal);
    }

    pub fn clear(&mut self) {
        self.states.clear();
        self.actions.clear();
        self.log_probs.clear();
        self.rewards.clear();
        self.values.clear();
        self.terminals.clear();
    }
}

/// Log-density of Beta(alpha, beta) at x, with the support endpoints nudged
/// inward so offloading flags of exactly 0 or 1 stay finite.
pub fn beta_log_pdf(alpha: f64, beta: f64, x: f64) -> f64 {
    let x = x.clamp(1e-12, 1.0 - 1e-12);
    ln_gamma(alpha + beta) - ln_gamma(alpha) - ln_gamma(beta)
        + (alpha - 1.0) * x.ln()
        + (beta - 1.0) * (1.0 - x).ln()
}

/// Map raw unit-cube output to an environment action: speed, heading, and
/// offload flags thresholded at one half (one half rounds up).
pub fn decode_action(raw: &[f64], users: usize, tasks_per_user: usize, max_speed: f64) -> Result<Action> {
    let expect = users * tasks_per_user + 2;
    if raw.len() != expect {
        return Err(Error::dimension(format!(
            "raw action has {} entries, expected {expect}",
            raw.len()
        )));
    }
    if raw.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("raw action left the unit cube".to_string()));
    }
    let mut offload = Vec::with_capacity(users);
    for u in 0..users {
        offload.push(
            (0..tasks_per_user)
                .map(|n| raw[2 + u * tasks_per_user + n] >= 0.5)
                .collect(),
        );
    }
    Ok(Action {
        speed: raw[0] * max_speed,
        heading: raw[1] * std::f64::consts::TAU,
        offload,
    })
}

/// Append the normalized forecast positions of every user to the
/// environment observation.
pub fn augment_state(
    state: &[f64],
    predictions: &[Vec<[f64; 2]>],
    horizon: usize,
    arena: &Arena,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(state.len() + 2 * predictions.len() * horizon);
    out.extend_from_slice(state);
    for (u, pred) in predictions.iter().enumerate() {
        if pred.len() != horizon {
            return Err(Error::contract(format!(
                "user {u} prediction has {} points, expected {horizon}",
                pred.len()
            )));
        }
        for &p in pred {
            let n = arena.normalize(p);
            out.push(n[0]);
            out.push(n[1]);
        }
    }
    Ok(out)
}

/// GAE advantages and one-step value targets. `values` carries one entry per
/// step plus the bootstrap value of the state after the last step (zero when
/// that state is terminal). Episode ends cut both recursions.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    terminals: &[bool],
    discount: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n + 1 || terminals.len() != n {
        return Err(Error::contract(format!(
            "{n} rewards need {} values and {n} terminals, got {} and {}",
            n + 1,
            values.len(),
            terminals.len()
        )));
    }
    let mut advantages = vec![0.0; n];
    let mut targets = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let mask = if terminals[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + discount * values[t + 1] * mask - values[t];
        acc = delta + discount * lambda * mask * acc;
        advantages[t] = acc;
        targets[t] = rewards[t] + discount * values[t + 1] * mask;
    }
    Ok((advantages, targets))
}

/// Center and scale advantages over the update batch. Batches too small to
/// estimate a spread pass through unchanged so the gradient sign survives.
pub fn standardize_advantages(advantages: &[f64]) -> Vec<f64> {
    let n = advantages.len();
    if n < 2 {
        return advantages.to_vec();
    }
    let mean = advantages.iter().sum::<f64>() / n as f64;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < 1e-8 {
        return advantages.to_vec();
    }
    advantages.iter().map(|a| (a - mean) / std).collect()
}

#[derive(Clone, Debug)]
struct Mlp {
    l1: Linear,
    l2: Linear,
    head: Linear,
}

impl Mlp {
    fn new(input: usize, hidden: usize, output: usize, rng: &mut ChaCha12Rng) -> Self {
        Mlp {
            l1: Linear::new(input, hidden, rng),
            l2: Linear::new(hidden, hidden, rng),
            head: Linear::new(hidden, output, rng),
        }
    }

    fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        BoundMlp {
            l1: self.l1.bind(tape),
            l2: self.l2.bind(tape),
            head: self.head.bind(tape),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.l1.w, &self.l1.b, &self.l2.w, &self.l2.b, &self.head.w, &self.head.b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.l1.w,
            &mut self.l1.b,
            &mut self.l2.w,
            &mut self.l2.b,
            &mut self.head.w,
            &mut self.head.b,
        ]
    }
}

struct BoundMlp<'t> {
    l1: crate::nn::BoundLinear<'t>,
    l2: crate::nn::BoundLinear<'t>,
    head: crate::nn::BoundLinear<'t>,
}

impl<'t> BoundMlp<'t> {
    fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let h1 = self.l1.forward(x)?.tanh();
        let h2 = self.l2.forward(h1)?.tanh();
        self.head.forward(h2)
    }

    fn ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::with_capacity(6);
        ids.extend(self.l1.ids());
        ids.extend(self.l2.ids());
        ids.extend(self.head.ids());
        ids
    }
}

/// Actor-critic pair with Beta policy head.
#[derive(Clone, Debug)]
pub struct PetoAgent {
    pub cfg: AgentConfig,
    pub obs_dim: usize,
    pub act_dim: usize,
    actor: Mlp,
    critic: Mlp,
    actor_opt: AdamState,
    critic_opt: AdamState,
}

/// Shape parameters of the per-dimension Beta policy at one state.
#[derive(Clone, Debug)]
pub struct BetaHead {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl PetoAgent {
    pub fn new(obs_dim: usize, act_dim: usize, cfg: AgentConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        cfg.validate()?;
        let actor = Mlp::new(obs_dim, cfg.hidden, 2 * act_dim, rng);
        let critic = Mlp::new(obs_dim, cfg.hidden, 1, rng);
        let actor_opt = AdamState::new(&actor.params(), cfg.learning_rate);
        let critic_opt = AdamState::new(&critic.params(), cfg.learning_rate);
        Ok(PetoAgent {
            cfg,
            obs_dim,
            act_dim,
            actor,
            critic,
            actor_opt,
            critic_opt,
        })
    }

    /// Beta parameters at one state: softplus(head) + 1 keeps both above 1.
    pub fn policy_params(&self, obs: &[f64]) -> Result<BetaHead> {
        let tape = Tape::new();
        let bound = self.actor.bind(&tape);
        let x = tape.constant(Tensor::matrix(1, self.obs_dim, obs.to_vec())?);
        let out = bound.forward(x)?.softplus().add_scalar(1.0).value();
        let (alpha, beta) = out.data().split_at(self.act_dim);
        Ok(BetaHead {
            alpha: alpha.to_vec(),
            beta: beta.to_vec(),
        })
    }

    /// Sample a raw unit-cube action and its log-probability.
    pub fn sample_action(&self, obs: &[f64], rng: &mut ChaCha12Rng) -> Result<(Vec<f64>, f64)> {
        let head = self.policy_params(obs)?;
        let mut raw = Vec::with_capacity(self.act_dim);
        let mut log_prob = 0.0;
        for d in 0..self.act_dim {
            let dist = rand_distr::Beta::new(head.alpha[d], head.beta[d])
                .map_err(|e| Error::contract(format!("beta parameters invalid: {e}")))?;
            let x: f64 = dist.sample(rng);
            log_prob += beta_log_pdf(head.alpha[d], head.beta[d], x);
            raw.push(x);
        }
        Ok((raw, log_prob))
    }

    /// Deterministic action: the per-dimension Beta mean.
    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let head = self.policy_params(obs)?;
        Ok((0..self.act_dim)
            .map(|d| head.alpha[d] / (head.alpha[d] + head.beta[d]))
            .collect())
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.critic.bind(&tape);
        let x = tape.constant(Tensor::matrix(1, self.obs_dim, obs.to_vec())?);
        Ok(bound.forward(x)?.value().item())
    }

    /// Clipped-surrogate update over the full buffer. `bootstrap` is the
    /// value of the state after the final stored step (zero if terminal).
    pub fn ppo_update(
        &mut self,
        buffer: &RolloutBuffer,
        bootstrap: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<UpdateStats> {
        if buffer.is_empty() {
            return Err(Error::contract("ppo update on an empty buffer".to_string()));
        }
        let n = buffer.len();
        let mut values = buffer.values.clone();
        values.push(bootstrap);
        let (advantages, targets) = compute_gae(
            &buffer.rewards,
            &values,
            &buffer.terminals,
            self.cfg.discount,
            self.cfg.gae_lambda,
        )?;
        let advantages = standardize_advantages(&advantages);

        let mut order: Vec<usize> = (0..n).collect();
        let mut actor_loss_sum = 0.0;
        let mut critic_loss_sum = 0.0;
        let mut batches = 0usize;
        for _ in 0..self.cfg.epochs_per_update {
            use rand::seq::SliceRandom;
            order.shuffle(rng);
            for chunk in order.chunks(self.cfg.minibatch_size) {
                let b = chunk.len();
                let mut state_data = Vec::with_capacity(b * self.obs_dim);
                let mut ln_x = Vec::with_capacity(b * self.act_dim);
                let mut ln_1mx = Vec::with_capacity(b * self.act_dim);
                let mut old_logp = Vec::with_capacity(b);
                let mut adv = Vec::with_capacity(b);
                let mut tar = Vec::with_capacity(b);
                for &i in chunk {
                    state_data.extend_from_slice(&buffer.states[i]);
                    for &x in &buffer.actions[i] {
                        let xc = x.clamp(1e-12, 1.0 - 1e-12);
                        ln_x.push(xc.ln());
                        ln_1mx.push((1.0 - xc).ln());
                    }
                    old_logp.push(buffer.log_probs[i]);
                    adv.push(advantages[i]);
                    tar.push(targets[i]);
                }

                // actor pass
                let tape = Tape::new();
                let bound = self.actor.bind(&tape);
                let states = tape.constant(Tensor::matrix(b, self.obs_dim, state_data.clone())?);
                let out = bound.forward(states)?.softplus().add_scalar(1.0);
                let alpha = out.slice_cols(0, self.act_dim)?;
                let beta = out.slice_cols(self.act_dim, self.act_dim)?;
                let ln_x_c = tape.constant(Tensor::matrix(b, self.act_dim, ln_x)?);
                let ln_1mx_c = tape.constant(Tensor::matrix(b, self.act_dim, ln_1mx)?);
                let log_pdf = alpha
                    .add(beta)?
                    .ln_gamma()
                    .sub(alpha.ln_gamma())?
                    .sub(beta.ln_gamma())?
                    .add(alpha.add_scalar(-1.0).mul(ln_x_c)?)?
                    .add(beta.add_scalar(-1.0).mul(ln_1mx_c)?)?;
                let logp_new = log_pdf.row_sums();
                let old = tape.constant(Tensor::vector(old_logp));
                let ratio = logp_new.sub(old)?.exp();
                let adv_c = tape.constant(Tensor::vector(adv));
                let unclipped = ratio.mul(adv_c)?;
                let clipped = ratio
                    .clamp_const(1.0 - self.cfg.clip_epsilon, 1.0 + self.cfg.clip_epsilon)
                    .mul(adv_c)?;
                let actor_loss = unclipped.min_elem(clipped)?.mean_all().scale(-1.0);
                actor_loss_sum += actor_loss.value().item();
                let mut grads = tape.backward(actor_loss)?;
                let ids = bound.ids();
                let gvec: Vec<Tensor> = ids
                    .iter()
                    .map(|&id| grads.take_id(id).expect("actor parameters reachable"))
                    .collect();
                self.actor_opt.step(&mut self.actor.params_mut(), &gvec)?;

                // critic pass
                let tape = Tape::new();
                let bound = self.critic.bind(&tape);
                let states = tape.constant(Tensor::matrix(b, self.obs_dim, state_data)?);
                let v = bound.forward(states)?.reshape(vec![b])?;
                let target = tape.constant(Tensor::vector(tar));
                let diff = v.sub(target)?;
                let critic_loss = diff.mul(diff)?.mean_all().scale(0.5);
                critic_loss_sum += critic_loss.value().item();
                let mut grads = tape.backward(critic_loss)?;
                let ids = bound.ids();
                let gvec: Vec<Tensor> = ids
                    .iter()
                    .map(|&id| grads.take_id(id).expect("critic parameters reachable"))
                    .collect();
                self.critic_opt.step(&mut self.critic.params_mut(), &gvec)?;
                batches += 1;
            }
        }
        Ok(UpdateStats {
            actor_loss: actor_loss_sum / batches as f64,
            critic_loss: critic_loss_sum / batches as f64,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for net in ["actor", "critic"] {
            for p in ["l1.w", "l1.b", "l2.w", "l2.b", "head.w", "head.b"] {
                names.push(format!("{net}.{p}"));
            }
        }
        names
    }

    pub fn to_checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let c = &self.cfg;
        let mut entries = vec![(
            "meta/config".to_string(),
            Tensor::vector(vec![
                self.obs_dim as f64,
                self.act_dim as f64,
                c.hidden as f64,
                c.discount,
                c.gae_lambda,
                c.clip_epsilon,
                c.learning_rate,
            ]),
        )];
        for (name, tensor) in self.param_names().into_iter().zip(self.params()) {
            entries.push((name, tensor.clone()));
        }
        entries
    }

    pub fn from_checkpoint_entries(entries: &[(String, Tensor)]) -> Result<PetoAgent> {
        let meta = crate::checkpoint::find(entries, "meta/config")?.data().to_vec();
        if meta.len() != 7 {
            return Err(Error::config("malformed agent meta/config".to_string()));
        }
        let cfg = AgentConfig {
            hidden: meta[2] as usize,
            discount: meta[3],
            gae_lambda: meta[4],
            clip_epsilon: meta[5],
            learning_rate: meta[6],
            ..AgentConfig::default()
        };
        let mut rng = crate::rng::stream(0, "checkpoint-load");
        let mut agent = PetoAgent::new(meta[0] as usize, meta[1] as usize, cfg, &mut rng)?;
        let names = agent.param_names();
        for (name, param) in names.iter().zip(agent.params_mut()) {
            let saved = crate::checkpoint::find(entries, name)?;
            if saved.shape() != param.shape() {
                return Err(Error::config(format!(
                    "checkpoint entry `{name}` has shape {:?}, expected {:?}",
                    saved.shape(),
                    param.shape()
                )));
            }
            *param = saved.clone();
        }
        Ok(agent)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.actor.params();
        out.extend(self.critic.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.actor.params_mut();
        out.extend(self.critic.params_mut());
        out
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
}

/// Per-episode training metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeMetrics {
    pub episode: usize,
    /// Episode mean of the criticality-weighted completion time.
    pub weighted_avg_completion: f64,
    pub remaining_energy: f64,
    /// Slots with a violated energy or deadline constraint.
    pub violations: usize,
}

/// Observation for the current env state: base vector plus per-user
/// forecasts when a predictor is attached.
pub fn observe(env: &WbanEnv, predictor: Option<&Predictor>) -> Result<Vec<f64>> {
    let state = env.state_vector();
    match predictor {
        None => Ok(state),
        Some(model) => {
            let mut preds = Vec::with_capacity(env.cfg.users);
            for u in 0..env.cfg.users {
                let (p, _) = model.predict_horizon(env.observed_positions(u))?;
                preds.push(p);
            }
            augment_state(&state, &preds, model.cfg.horizon, env.arena())
        }
    }
}

/// Observation width for an env/predictor pairing.
pub fn observation_dim(env: &WbanEnv, predictor: Option<&Predictor>) -> usize {
    env.state_dim() + predictor.map_or(0, |p| 2 * env.cfg.users * p.cfg.horizon)
}

/// On-policy training loop: predict, augment, act, step, and update at
/// every rollout boundary. The predictor stays frozen throughout.
pub fn train_peto(
    env: &mut WbanEnv,
    predictor: Option<&Predictor>,
    cfg: &AgentConfig,
    seed: u64,
) -> Result<(PetoAgent, Vec<EpisodeMetrics>)> {
    let obs_dim = observation_dim(env, predictor);
    let act_dim = env.action_dim();
    let mut init_rng = crate::rng::stream(seed, "agent-init");
    let mut agent = PetoAgent::new(obs_dim, act_dim, cfg.clone(), &mut init_rng)?;
    let mut sample_rng = crate::rng::stream(seed, "agent-sample");
    let mut update_rng = crate::rng::stream(seed, "agent-update");
    let mut buffer = RolloutBuffer::new(cfg.rollout_length);
    let mut metrics = Vec::with_capacity(cfg.episodes);

    for episode in 0..cfg.episodes {
        env.reset();
        let horizon = env.cfg.horizon;
        let mut completion_sum = 0.0;
        let mut violations = 0usize;
        let mut obs = observe(env, predictor)?;
        for slot in 1..=horizon {
            let (raw, log_prob) = agent.sample_action(&obs, &mut sample_rng)?;
            let value = agent.value(&obs)?;
            let action = decode_action(&raw, env.cfg.users, env.cfg.tasks_per_user, env.cfg.max_speed)?;
            let outcome = env.step(&action)?;
            let terminal = slot == horizon;
            completion_sum += outcome.weighted_completion;
            if outcome.violated() {
                violations += 1;
            }
            buffer.push(obs.clone(), raw, log_prob, outcome.reward, value, terminal);
            let next_obs = if terminal { Vec::new() } else { observe(env, predictor)? };
            if buffer.is_full() {
                let bootstrap = if terminal { 0.0 } else { agent.value(&next_obs)? };
                agent.ppo_update(&buffer, bootstrap, &mut update_rng)?;
                buffer.clear();
            }
            obs = next_obs;
        }
        metrics.push(EpisodeMetrics {
            episode,
            weighted_avg_completion: completion_sum / horizon as f64,
            remaining_energy: env.state().energy_remaining,
            violations,
        });
    }
    Ok((agent, metrics))
}

/// Anything that can map the current env into a raw unit-cube action.
pub trait ActionSource {
    fn raw_action(&mut self, env: &WbanEnv) -> Result<Vec<f64>>;
}

/// Deterministic evaluation source: Beta-mean actions from a trained agent.
pub struct PetoSource<'a> {
    pub agent: &'a PetoAgent,
    pub predictor: Option<&'a Predictor>,
}

impl ActionSource for PetoSource<'_> {
    fn raw_action(&mut self, env: &WbanEnv) -> Result<Vec<f64>> {
        let obs = observe(env, self.predictor)?;
        self.agent.mean_action(&obs)
    }
}

/// Aggregate evaluation results.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_completion: f64,
    pub std_completion: f64,
    pub violation_rate: f64,
    pub mean_energy_used: f64,
    pub mean_reward: f64,
}

/// Roll out a policy without learning and summarize objective, violations,
/// and energy use.
pub fn evaluate_policy(
    source: &mut dyn ActionSource,
    env: &mut WbanEnv,
    episodes: usize,
) -> Result<EvalSummary> {
    let mut completions = Vec::with_capacity(episodes);
    let mut violated_slots = 0usize;
    let mut energy_used = 0.0;
    let mut reward_sum = 0.0;
    for _ in 0..episodes {
        env.reset();
        let horizon = env.cfg.horizon;
        let mut completion = 0.0;
        for _ in 1..=horizon {
            let raw = source.raw_action(env)?;
            let action = decode_action(&raw, env.cfg.users, env.cfg.tasks_per_user, env.cfg.max_speed)?;
            let outcome = env.step(&action)?;
            completion += outcome.weighted_completion;
            if outcome.violated() {
                violated_slots += 1;
            }
            reward_sum += outcome.reward;
        }
        completions.push(completion / horizon as f64);
        energy_used += env.cfg.battery - env.state().energy_remaining;
    }
    let n = episodes as f64;
    let mean = completions.iter().sum::<f64>() / n;
    let var = completions.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
    Ok(EvalSummary {
        episodes,
        mean_completion: mean,
        std_completion: var.sqrt(),
        violation_rate: violated_slots as f64 / (n * env.cfg.horizon as f64),
        mean_energy_used: energy_used / n,
        mean_reward: reward_sum / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_beta_has_zero_log_density() {
        assert!(beta_log_pdf(1.0, 1.0, 0.3).abs() < 1e-12);
        assert!(beta_log_pdf(1.0, 1.0, 0.9).abs() < 1e-12);
    }

    #[test]
    fn symmetric_beta_density_hand_value() {
        // Beta(2,2) at 1/2: Gamma(4)/(Gamma(2)Gamma(2)) * 0.25 = 1.5
        let lp = beta_log_pdf(2.0, 2.0, 0.5);
        assert!((lp.exp() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn log_prob_matches_reference_density() {
        use statrs::distribution::{Beta, Continuous};
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..50 {
            let a = rng.random_range(1.0..6.0);
            let b = rng.random_range(1.0..6.0);
            let x = rng.random_range(0.01..0.99);
            let reference = Beta::new(a, b).unwrap().pdf(x);
            assert!(
                (beta_log_pdf(a, b, x).exp() - reference).abs() <= 1e-9 * reference,
                "({a},{b},{x})"
            );
        }
    }

    #[test]
    fn samples_stay_inside_unit_interval_without_clipping() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut agent_rng = ChaCha12Rng::seed_from_u64(2);
        let agent = PetoAgent::new(4, 3, AgentConfig::default(), &mut rng).unwrap();
        let obs = vec![0.2, -0.4, 0.8, 0.1];
        for _ in 0..10_000 {
            let (raw, _) = agent.sample_action(&obs, &mut agent_rng).unwrap();
            for x in raw {
                assert!((0.0..=1.0).contains(&x));
            }
        }
    }

    #[test]
    fn sampled_log_prob_equals_product_of_densities() {
        use statrs::distribution::{Beta, Continuous};
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut agent_rng = ChaCha12Rng::seed_from_u64(4);
        let agent = PetoAgent::new(3, 4, AgentConfig::default(), &mut rng).unwrap();
        let obs = vec![0.5, 0.1, -0.2];
        let head = agent.policy_params(&obs).unwrap();
        for _ in 0..100 {
            let (raw, logp) = agent.sample_action(&obs, &mut agent_rng).unwrap();
            let product: f64 = raw
                .iter()
                .enumerate()
                .map(|(d, &x)| Beta::new(head.alpha[d], head.beta[d]).unwrap().pdf(x))
                .product();
            assert!((logp.exp() - product).abs() <= 1e-9 * product.max(1.0));
        }
    }

    #[test]
    fn decode_corners_and_threshold() {
        let a = decode_action(&[1.0, 1.0, 1.0, 1.0], 1, 2, 50.0).unwrap();
        assert_eq!(a.speed, 50.0);
        assert_eq!(a.heading, std::f64::consts::TAU);
        assert!(a.offload[0].iter().all(|&z| z));

        let a = decode_action(&[0.0, 0.0, 0.0, 0.0], 1, 2, 50.0).unwrap();
        assert_eq!(a.speed, 0.0);
        assert_eq!(a.heading, 0.0);
        assert!(a.offload[0].iter().all(|&z| !z));

        // one half rounds up to offloading
        let a = decode_action(&[0.2, 0.2, 0.5, 0.49999], 1, 2, 50.0).unwrap();
        assert!(a.offload[0][0]);
        assert!(!a.offload[0][1]);
    }

    #[test]
    fn augment_layout_and_identity() {
        let arena = Arena {
            min: [0.0, 0.0],
            max: [100.0, 100.0],
        };
        // base length matches 10 users x 5 tasks: 50 + 20 + 3 = 73
        let state = vec![0.5; 73];
        let preds: Vec<Vec<[f64; 2]>> = (0..10).map(|_| vec![[50.0, 25.0]; 10]).collect();
        let augmented = augment_state(&state, &preds, 10, &arena).unwrap();
        assert_eq!(augmented.len(), 273);
        assert_eq!(augmented[73], 0.5);
        assert_eq!(augmented[74], 0.25);

        // no predictions leaves the state untouched
        let plain = augment_state(&state, &[], 0, &arena).unwrap();
        assert_eq!(plain, state);

        // wrong horizon is a contract error
        assert!(augment_state(&state, &preds, 9, &arena).is_err());
    }

    #[test]
    fn gae_single_terminal_step() {
        let (adv, tar) = compute_gae(&[1.0], &[0.0, 0.0], &[true], 0.9, 0.9).unwrap();
        assert_eq!(adv, vec![1.0]);
        assert_eq!(tar, vec![1.0]);
    }

    #[test]
    fn gae_hand_recursion() {
        // deltas: d1 = 1 + 0.9*0.5 - 0.5 = 0.95, d2 = 1 + 0 - 0.5 = 0.5
        // A1 = d1 + 0.81 * d2 = 1.355, A2 = 0.5
        let (adv, tar) =
            compute_gae(&[1.0, 1.0], &[0.5, 0.5, 0.0], &[false, true], 0.9, 0.9).unwrap();
        assert!((adv[0] - 1.355).abs() < 1e-12);
        assert!((adv[1] - 0.5).abs() < 1e-12);
        assert!((tar[0] - 1.45).abs() < 1e-12);
        assert!((tar[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gae_lambda_zero_is_one_step_delta() {
        let rewards = [0.3, -0.2, 0.7];
        let values = [0.1, 0.4, -0.1, 0.2];
        let terms = [false, false, false];
        let (adv, _) = compute_gae(&rewards, &values, &terms, 0.95, 0.0).unwrap();
        for t in 0..3 {
            let delta = rewards[t] + 0.95 * values[t + 1] - values[t];
            assert!((adv[t] - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_with_unit_discount_and_lambda_is_monte_carlo() {
        // lambda = gamma = 1 on a finite episode: advantage = return - V(s)
        let rewards = [1.0, 2.0, 3.0];
        let values = [0.5, -0.5, 0.25, 0.0];
        let terms = [false, false, true];
        let (adv, _) = compute_gae(&rewards, &values, &terms, 1.0, 1.0).unwrap();
        let returns = [6.0, 5.0, 3.0];
        for t in 0..3 {
            assert!((adv[t] - (returns[t] - values[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_length_mismatch_is_rejected() {
        assert!(compute_gae(&[1.0], &[0.0], &[true], 0.9, 0.9).is_err());
    }

    #[test]
    fn clipped_surrogate_arithmetic() {
        // (ratio 1.5, adv 1, eps 0.2) -> min(1.5, 1.2) = 1.2
        // (ratio 0.5, adv -1, eps 0.2) -> min(-0.5, -0.8) = -0.8
        let tape = Tape::new();
        let ratio = tape.constant(Tensor::vector(vec![1.5, 0.5]));
        let adv = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        let unclipped = ratio.mul(adv).unwrap();
        let clipped = ratio.clamp_const(0.8, 1.2).mul(adv).unwrap();
        let obj = unclipped.min_elem(clipped).unwrap().value();
        assert_eq!(obj.data(), &[1.2, -0.8]);
    }

    #[test]
    fn tape_log_prob_matches_sampler_log_prob() {
        // fresh parameters: the surrogate ratio is exactly one
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut agent_rng = ChaCha12Rng::seed_from_u64(6);
        let agent = PetoAgent::new(3, 2, AgentConfig::default(), &mut rng).unwrap();
        let obs = vec![0.3, -0.1, 0.9];
        let (raw, logp) = agent.sample_action(&obs, &mut agent_rng).unwrap();

        let tape = Tape::new();
        let bound = agent.actor.bind(&tape);
        let x = tape.constant(Tensor::matrix(1, 3, obs).unwrap());
        let out = bound.forward(x).unwrap().softplus().add_scalar(1.0);
        let alpha = out.slice_cols(0, 2).unwrap();
        let beta = out.slice_cols(2, 2).unwrap();
        let ln_x = tape.constant(Tensor::matrix(1, 2, raw.iter().map(|v| v.ln()).collect()).unwrap());
        let ln_1mx =
            tape.constant(Tensor::matrix(1, 2, raw.iter().map(|v| (1.0 - v).ln()).collect()).unwrap());
        let log_pdf = alpha
            .add(beta)
            .unwrap()
            .ln_gamma()
            .sub(alpha.ln_gamma())
            .unwrap()
            .sub(beta.ln_gamma())
            .unwrap()
            .add(alpha.add_scalar(-1.0).mul(ln_x).unwrap())
            .unwrap()
            .add(beta.add_scalar(-1.0).mul(ln_1mx).unwrap())
            .unwrap();
        let tape_logp = log_pdf.row_sums().value().item();
        assert!(((tape_logp - logp).exp() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_sample_standardization_preserves_sign() {
        assert_eq!(standardize_advantages(&[2.5]), vec![2.5]);
        assert_eq!(standardize_advantages(&[-0.3]), vec![-0.3]);
        // constant batches also pass through rather than collapsing to zero
        assert_eq!(standardize_advantages(&[1.0, 1.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn empty_buffer_update_is_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut agent = PetoAgent::new(2, 2, AgentConfig::default(), &mut rng).unwrap();
        let buffer = RolloutBuffer::new(8);
        let mut up_rng = ChaCha12Rng::seed_from_u64(8);
        assert!(agent.ppo_update(&buffer, 0.0, &mut up_rng).is_err());
    }

    fn toy_env(seed: u64) -> WbanEnv {
        let mut cfg = crate::env::EnvConfig::default();
        cfg.users = 1;
        cfg.tasks_per_user = 1;
        cfg.horizon = 4;
        cfg.data_bits_range = (4e4, 5e4);
        cfg.cycles_range = (1e8, 2e8);
        cfg.altitude = 30.0;
        let traces = crate::geo::gen_synthetic_traces(1, 30, 42);
        WbanEnv::new(cfg, vec![1.0], vec![1.0], traces, seed).unwrap()
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let run = || {
            let mut env = toy_env(1);
            let cfg = AgentConfig {
                episodes: 6,
                rollout_length: 8,
                epochs_per_update: 2,
                minibatch_size: 4,
                hidden: 16,
                ..AgentConfig::default()
            };
            let (_, metrics) = train_peto(&mut env, None, &cfg, 33).unwrap();
            metrics
        };
        let a = run();
        assert_eq!(a.len(), 6);
        assert_eq!(a, run());
    }

    #[test]
    fn evaluation_is_deterministic_for_mean_actions() {
        let mut env = toy_env(2);
        let cfg = AgentConfig {
            episodes: 2,
            rollout_length: 8,
            epochs_per_update: 1,
            minibatch_size: 4,
            hidden: 16,
            ..AgentConfig::default()
        };
        let (agent, _) = train_peto(&mut env, None, &cfg, 44).unwrap();
        let eval = |seed| {
            let mut env = toy_env(seed);
            let mut source = PetoSource {
                agent: &agent,
                predictor: None,
            };
            evaluate_policy(&mut source, &mut env, 3).unwrap()
        };
        assert_eq!(eval(5), eval(5));
        let summary = eval(5);
        assert!(summary.violation_rate >= 0.0 && summary.violation_rate <= 1.0);
    }
}
