//! Proximal policy optimization over vectorized environments: rollout
//! collection, generalized advantage estimation, the clipped surrogate
//! update and the training loop that produces learning curves.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::agent::{choose, Agent, AgentConfig, AgentKind, AgentState, Percept};
use crate::envs::{EnvSpec, Environment, Observation};
use crate::error::{Error, Result};
use crate::memnet::MemoryModel;
use crate::ndiff::{adamw_step, checkpoint, clip_grad_norm, AdamWConfig, Array, Bound, OptimizerState, Tape, Var};
use crate::rng::{sub_seed, Rng};
use crate::stats::{CurvePoint, RunRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    pub lr: f64,
    pub rollout: usize,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub max_grad_norm: f64,
    pub num_envs: usize,
    pub total_steps: u64,
    pub weight_decay: f64,
    /// Standardize advantages within each minibatch.
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            rollout: 64,
            ent_coef: 1e-2,
            vf_coef: 0.5,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 3,
            minibatches: 8,
            max_grad_norm: 0.5,
            num_envs: 16,
            total_steps: 500_000,
            weight_decay: 1e-2,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    /// Per-environment defaults; the key task uses the longer rollout,
    /// stronger entropy bonus and `lambda = 0.99`.
    pub fn for_env(env: &EnvSpec) -> Self {
        match env {
            EnvSpec::KeyCorridor(_) => Self {
                rollout: 128,
                ent_coef: 5e-2,
                lambda: 0.99,
                ..Self::default()
            },
            _ => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.clip > 0.0) {
            return bad("clip range must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.epochs == 0 || self.minibatches == 0 || self.rollout == 0 || self.num_envs == 0 {
            return bad("epochs, minibatches, rollout and num_envs must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("learning rate and max grad norm must be positive");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Generalized advantage estimation for one trajectory segment.
/// `dones[t]` marks that the episode ended with step `t`; `bootstrap` is the
/// value of the state after the last step.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Invalid(format!(
            "gae: {} rewards, {} values, {} dones",
            n,
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * next_value - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// On-policy storage, step-major: entry `t * num_envs + e`.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub enc_in: Vec<Vec<f64>>,
    /// `h_t` as fed to the heads (previous hidden state for the recurrent
    /// baseline), so the frozen memory never runs during updates.
    pub h: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// First step of an episode.
    pub starts: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(num_envs: usize) -> Self {
        Self {
            num_envs,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.len() / self.num_envs.max(1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        percept: &Percept,
        action: usize,
        reward: f64,
        done: bool,
        log_prob: f64,
        value: f64,
        start: bool,
    ) {
        self.enc_in.push(percept.enc_in.clone());
        self.h.push(percept.h.clone());
        self.actions.push(action);
        self.rewards.push(reward);
        self.dones.push(done);
        self.log_probs.push(log_prob);
        self.values.push(value);
        self.starts.push(start);
    }

    /// Fills `advantages` and `returns` env by env.
    pub fn finish(&mut self, bootstrap: &[f64], gamma: f64, lambda: f64) -> Result<()> {
        let (e, t) = (self.num_envs, self.steps());
        if bootstrap.len() != e || t * e != self.len() {
            return Err(Error::Invalid("rollout buffer is not rectangular".into()));
        }
        self.advantages = vec![0.0; self.len()];
        self.returns = vec![0.0; self.len()];
        for env in 0..e {
            let idx: Vec<usize> = (0..t).map(|s| s * e + env).collect();
            let r: Vec<f64> = idx.iter().map(|&i| self.rewards[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| self.values[i]).collect();
            let d: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let (adv, ret) = gae(&r, &v, &d, bootstrap[env], gamma, lambda)?;
            for (k, &i) in idx.iter().enumerate() {
                self.advantages[i] = adv[k];
                self.returns[i] = ret[k];
            }
        }
        Ok(())
    }
}

/// Loss terms of one minibatch.
pub struct LossVars {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    /// Importance ratios `[B]`.
    pub ratio: Var,
}

/// Clipped surrogate, squared-error value loss and entropy bonus on
/// precomputed `logits: [B, A]` and `values: [B]`.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_loss(
    tape: &mut Tape,
    logits: Var,
    values: Var,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
) -> Result<LossVars> {
    let b = actions.len();
    let logp = tape.log_softmax(logits);
    let taken = tape.pick(logp, actions)?;
    let old = tape.constant(Array::vector(old_log_probs.to_vec()));
    let diff = tape.sub(taken, old)?;
    let ratio = tape.exp(diff);
    let adv = tape.constant(Array::vector(advantages.to_vec()));
    let unclipped = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let clipped = tape.mul(clipped, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let mean_surrogate = tape.mean(surrogate);
    let policy = tape.neg(mean_surrogate);

    let target = tape.constant(Array::vector(returns.to_vec()));
    let err = tape.sub(values, target)?;
    let sq = tape.mul(err, err)?;
    let value = tape.mean(sq);

    let probs = tape.exp(logp);
    let plogp = tape.mul(probs, logp)?;
    let total_plogp = tape.sum(plogp);
    let entropy = tape.scale(total_plogp, -1.0 / b as f64);

    let weighted_value = tape.scale(value, cfg.vf_coef);
    let weighted_entropy = tape.scale(entropy, -cfg.ent_coef);
    let pv = tape.add(policy, weighted_value)?;
    let total = tape.add(pv, weighted_entropy)?;
    Ok(LossVars {
        total,
        policy,
        value,
        entropy,
        ratio,
    })
}

fn normalized(adv: &[f64], on: bool) -> Vec<f64> {
    if !on || adv.len() < 2 {
        return adv.to_vec();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

fn rows(src: &[Vec<f64>], idx: &[usize]) -> Result<Array> {
    let width = src.get(idx[0]).map_or(0, |r| r.len());
    let data: Vec<f64> = idx.iter().flat_map(|&i| src[i].iter().copied()).collect();
    Array::new(vec![idx.len(), width], data)
}

/// A minibatch ready for [`ppo_loss`].
#[derive(Clone, Debug)]
pub struct Minibatch {
    /// Buffer indices, step-major (for the recurrent agent: `t * envs + j`
    /// over the selected environments).
    pub index: Vec<usize>,
    /// Selected environments, for sequence minibatches.
    pub envs: Option<Vec<usize>>,
    pub advantages: Vec<f64>,
}

/// Logits and values for a minibatch under the bound (trainable) weights.
pub fn minibatch_forward(
    agent: &Agent,
    tape: &mut Tape,
    bound: &Bound,
    buffer: &RolloutBuffer,
    mb: &Minibatch,
) -> Result<(Var, Var)> {
    let enc_in = tape.constant(rows(&buffer.enc_in, &mb.index)?);
    match (agent.kind(), &mb.envs) {
        (AgentKind::Recurrent, Some(envs)) => {
            let bm = envs.len();
            let t = mb.index.len() / bm;
            let m = agent.history_dim();
            let enc = agent.encode(tape, bound, enc_in)?;
            let mut h = tape.constant(rows(&buffer.h, &mb.index[..bm])?);
            let mut hs = Vec::with_capacity(t);
            for s in 0..t {
                let e_s = tape.slice_rows(enc, s * bm, bm)?;
                let keep: Vec<f64> = mb.index[s * bm..(s + 1) * bm]
                    .iter()
                    .flat_map(|&i| std::iter::repeat(if buffer.starts[i] { 0.0 } else { 1.0 }).take(m))
                    .collect();
                let keep = tape.constant(Array::new(vec![bm, m], keep)?);
                let h_in = tape.mul(h, keep)?;
                h = agent.gru(tape, bound, e_s, h_in)?;
                hs.push(h);
            }
            let hall = tape.concat_rows(&hs)?;
            let features = tape.concat(&[hall, enc])?;
            agent.heads(tape, bound, features)
        }
        (AgentKind::Recurrent, None) => Err(Error::Invalid("recurrent minibatch needs whole sequences".into())),
        _ => {
            let h = if agent.history_dim() > 0 {
                Some(tape.constant(rows(&buffer.h, &mb.index)?))
            } else {
                None
            };
            let out = agent.forward(tape, bound, enc_in, h)?;
            Ok((out.logits, out.values))
        }
    }
}

/// Full PPO loss graph of one minibatch.
pub fn ppo_loss(
    agent: &Agent,
    tape: &mut Tape,
    bound: &Bound,
    buffer: &RolloutBuffer,
    mb: &Minibatch,
    cfg: &PpoConfig,
) -> Result<LossVars> {
    let (logits, values) = minibatch_forward(agent, tape, bound, buffer, mb)?;
    let pick = |src: &[f64]| mb.index.iter().map(|&i| src[i]).collect::<Vec<_>>();
    let actions: Vec<usize> = mb.index.iter().map(|&i| buffer.actions[i]).collect();
    surrogate_loss(
        tape,
        logits,
        values,
        &actions,
        &pick(&buffer.log_probs),
        &mb.advantages,
        &pick(&buffer.returns),
        cfg,
    )
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    /// `max |ratio - 1|` on the first minibatch of the first epoch.
    pub first_ratio_deviation: f64,
}

/// Splits the buffer into minibatches for one epoch.
pub fn minibatches(agent: &Agent, buffer: &RolloutBuffer, cfg: &PpoConfig, rng: &mut Rng) -> Vec<Minibatch> {
    let e = buffer.num_envs;
    let t = buffer.steps();
    let mut out = Vec::new();
    if agent.kind() == AgentKind::Recurrent {
        let mut envs: Vec<usize> = (0..e).collect();
        rng.shuffle(&mut envs);
        let per = e.div_ceil(cfg.minibatches.min(e));
        for chunk in envs.chunks(per) {
            let index: Vec<usize> = (0..t).flat_map(|s| chunk.iter().map(move |&j| s * e + j)).collect();
            let adv: Vec<f64> = index.iter().map(|&i| buffer.advantages[i]).collect();
            out.push(Minibatch {
                advantages: normalized(&adv, cfg.normalize_advantages),
                index,
                envs: Some(chunk.to_vec()),
            });
        }
    } else {
        let mut all: Vec<usize> = (0..buffer.len()).collect();
        rng.shuffle(&mut all);
        let per = buffer.len().div_ceil(cfg.minibatches.min(buffer.len()));
        for chunk in all.chunks(per) {
            let adv: Vec<f64> = chunk.iter().map(|&i| buffer.advantages[i]).collect();
            out.push(Minibatch {
                advantages: normalized(&adv, cfg.normalize_advantages),
                index: chunk.to_vec(),
                envs: None,
            });
        }
    }
    out
}

/// PPO epochs over a finished buffer: clipped surrogate, gradient-norm
/// clipping and one AdamW step per minibatch.
pub fn ppo_update(
    agent: &mut Agent,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    opt: &mut OptimizerState,
    rng: &mut Rng,
) -> Result<UpdateStats> {
    if buffer.is_empty() || buffer.advantages.len() != buffer.len() {
        return Err(Error::Invalid("ppo_update needs a finished, non-empty buffer".into()));
    }
    let mut stats = UpdateStats::default();
    let mut count = 0.0;
    for epoch in 0..cfg.epochs {
        for (k, mb) in minibatches(agent, buffer, cfg, rng).iter().enumerate() {
            let mut tape = Tape::new();
            let bound = tape.bind(agent.params());
            let loss = ppo_loss(agent, &mut tape, &bound, buffer, mb, cfg)?;
            let total = tape.value(loss.total).item();
            let (pl, vl, ent) = (
                tape.value(loss.policy).item(),
                tape.value(loss.value).item(),
                tape.value(loss.entropy).item(),
            );
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "epoch {epoch} minibatch {k}: policy {pl}, value {vl}, entropy {ent}"
                )));
            }
            let ratios = tape.value(loss.ratio).data().to_vec();
            if epoch == 0 && k == 0 {
                stats.first_ratio_deviation = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
            }
            tape.backward_scalar(loss.total)?;
            let mut grads = tape.grads_for(&bound)?;
            let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
            adamw_step(agent.params_mut(), &grads, opt)?;
            let n = ratios.len() as f64;
            stats.policy_loss += pl;
            stats.value_loss += vl;
            stats.entropy += ent;
            stats.grad_norm += norm;
            stats.approx_kl += ratios.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / n;
            stats.clip_fraction += ratios.iter().filter(|r| (*r - 1.0).abs() > cfg.clip).count() as f64 / n;
            count += 1.0;
        }
    }
    for v in [
        &mut stats.policy_loss,
        &mut stats.value_loss,
        &mut stats.entropy,
        &mut stats.grad_norm,
        &mut stats.approx_kl,
        &mut stats.clip_fraction,
    ] {
        *v /= count;
    }
    Ok(stats)
}

// ---- training loop ----

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub env: EnvSpec,
    pub agent: AgentConfig,
    pub ppo: PpoConfig,
    pub seed: u64,
    /// Label written into the run record.
    pub method: String,
    /// Save a checkpoint every this many updates (0: initial and final only).
    pub checkpoint_every: usize,
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub agent: Agent,
    pub updates: Vec<UpdateStats>,
}

/// One environment slot of the vectorized rollout.
struct Worker {
    env: Box<dyn Environment>,
    seeds: Rng,
    state: AgentState,
    percept: Percept,
    start: bool,
    ret: f64,
    len: u64,
}

impl Worker {
    fn reset(&mut self, agent: &Agent) -> Result<()> {
        let episode_seed = self.seeds.next_u64();
        let obs: Observation = self.env.reset(episode_seed);
        self.state = agent.initial_state(episode_seed);
        self.percept = agent.perceive(&mut self.state, &obs)?;
        self.start = true;
        self.ret = 0.0;
        self.len = 0;
        Ok(())
    }
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:010}.helm"))
}

/// Collects rollouts from `num_envs` environments and updates the agent
/// until the step budget is spent. With `out_dir`, writes `curve.csv`
/// (appended after every update) and checkpoints; on an environment fault
/// the files already written are left in place.
pub fn train(cfg: &TrainConfig, pretrained: Option<&MemoryModel>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.ppo.validate()?;
    let probe = cfg.env.build();
    let mut agent = Agent::new(
        cfg.agent.clone(),
        probe.obs_shape(),
        probe.num_actions(),
        sub_seed(cfg.seed, "agent"),
        pretrained,
    )?;
    let env_name = cfg.env.name();
    let mut record = RunRecord::new(&cfg.method, env_name, cfg.seed);
    let mut curve = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = File::create(dir.join("curve.csv"))?;
            writeln!(f, "{}", crate::stats::CURVE_HEADER.join(","))?;
            checkpoint::save(&checkpoint_path(dir, 0), &agent.to_checkpoint())?;
            Some(OpenOptions::new().append(true).open(dir.join("curve.csv"))?)
        }
        None => None,
    };

    let mut workers = Vec::with_capacity(cfg.ppo.num_envs);
    for i in 0..cfg.ppo.num_envs {
        let mut w = Worker {
            env: cfg.env.build(),
            seeds: Rng::for_component(cfg.seed, &format!("env.{i}")),
            state: agent.initial_state(0),
            percept: Percept {
                enc_in: Vec::new(),
                h: Vec::new(),
            },
            start: true,
            ret: 0.0,
            len: 0,
        };
        w.reset(&agent)?;
        workers.push(w);
    }

    let mut policy_rng = Rng::for_component(cfg.seed, "ppo.policy");
    let mut shuffle_rng = Rng::for_component(cfg.seed, "ppo.shuffle");
    let mut opt = OptimizerState::new(cfg.ppo.optimizer());
    let mut steps: u64 = 0;
    let mut episodes: u64 = 0;
    let mut updates = Vec::new();
    let mut last_saved = 0;

    while steps < cfg.ppo.total_steps {
        let mut buffer = RolloutBuffer::new(workers.len());
        let logged_before = record.points.len();
        for _ in 0..cfg.ppo.rollout {
            let percepts: Vec<Percept> = workers.iter().map(|w| w.percept.clone()).collect();
            let outs = agent.evaluate(&percepts)?;
            for (w, out) in workers.iter_mut().zip(&outs) {
                let (action, log_prob) = choose(&out.logits, &mut policy_rng, false);
                agent.commit(&mut w.state, action, out);
                let step = w.env.step(action)?;
                steps += 1;
                w.ret += step.reward;
                w.len += 1;
                buffer.push(&w.percept, action, step.reward, step.done, log_prob, out.value, w.start);
                if step.done {
                    episodes += 1;
                    record.push(CurvePoint {
                        step: steps,
                        episode: episodes,
                        ret: w.ret,
                        length: w.len,
                    })?;
                    w.reset(&agent)?;
                } else {
                    w.start = false;
                    w.percept = agent.perceive(&mut w.state, &step.observation)?;
                }
            }
        }
        let tail: Vec<Percept> = workers.iter().map(|w| w.percept.clone()).collect();
        let bootstrap: Vec<f64> = agent.evaluate(&tail)?.iter().map(|o| o.value).collect();
        buffer.finish(&bootstrap, cfg.ppo.gamma, cfg.ppo.lambda)?;
        updates.push(ppo_update(&mut agent, &buffer, &cfg.ppo, &mut opt, &mut shuffle_rng)?);

        if let (Some(f), Some(dir)) = (curve.as_mut(), out_dir) {
            for p in &record.points[logged_before..] {
                writeln!(f, "{},{},{:?},{},{}", p.step, p.episode, p.ret, p.length, cfg.seed)?;
            }
            if cfg.checkpoint_every > 0 && updates.len() % cfg.checkpoint_every == 0 {
                checkpoint::save(&checkpoint_path(dir, steps), &agent.to_checkpoint())?;
                last_saved = steps;
            }
        }
    }
    if let Some(dir) = out_dir {
        if steps > last_saved {
            checkpoint::save(&checkpoint_path(dir, steps), &agent.to_checkpoint())?;
        }
    }
    Ok(TrainOutcome { record, agent, updates })
}

/// Returns of `episodes` complete episodes played by `agent`, each on a
/// fresh environment seeded from `seed`.
pub fn evaluate_policy(agent: &Agent, env: &EnvSpec, episodes: usize, seed: u64, greedy: bool) -> Result<Vec<f64>> {
    let mut env = env.build();
    let mut seeds = Rng::for_component(seed, "eval.env");
    let mut rng = Rng::for_component(seed, "eval.policy");
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let episode_seed = seeds.next_u64();
        let mut obs = env.reset(episode_seed);
        let mut state = agent.initial_state(episode_seed);
        let mut total = 0.0;
        loop {
            let out = agent.act(&obs, &mut state, &mut rng, greedy)?;
            let step = env.step(out.action)?;
            total += step.reward;
            if step.done {
                break;
            }
            obs = step.observation;
        }
        returns.push(total);
    }
    Ok(returns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memnet::MemoryModelConfig;
    use crate::rng::Rng;
    use proptest::prelude::*;

    /// Direct transcription of the recursive definition.
    fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
        fn adv(t: usize, r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> f64 {
            let next_v = if t + 1 < r.len() { v[t + 1] } else { boot };
            let live = if d[t] { 0.0 } else { 1.0 };
            let delta = r[t] + g * live * next_v - v[t];
            if t + 1 == r.len() {
                delta
            } else {
                delta + g * l * live * adv(t + 1, r, v, d, boot, g, l)
            }
        }
        (0..r.len()).map(|t| adv(t, r, v, d, boot, g, l)).collect()
    }

    #[test]
    fn gae_special_cases() {
        let r = [1.0, -0.5, 2.0, 0.25];
        let v = [0.3, 0.1, -0.2, 0.7];
        let d = [false, true, false, false];
        let (adv, ret) = gae(&r, &v, &d, 0.9, 0.9, 0.0).unwrap();
        for t in 0..4 {
            let next = if t == 3 { 0.9 } else { v[t + 1] };
            let live = if d[t] { 0.0 } else { 1.0 };
            assert_eq!(adv[t], r[t] + 0.9 * live * next - v[t]);
            assert_eq!(ret[t], adv[t] + v[t]);
        }
        let (adv, _) = gae(&r, &v, &[false; 4], 0.9, 1.0, 1.0).unwrap();
        for t in 0..4 {
            let tail: f64 = r[t..].iter().sum();
            assert!((adv[t] - (tail + 0.9 - v[t])).abs() < 1e-12);
        }
        assert!(gae(&r, &v[..3], &d, 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn gae_matches_oracle_on_six_steps() {
        let mut rng = Rng::new(0);
        for _ in 0..200 {
            let r: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let d: Vec<bool> = (0..6).map(|_| rng.uniform() < 0.3).collect();
            let boot = rng.normal();
            let (adv, _) = gae(&r, &v, &d, boot, 0.97, 0.9).unwrap();
            for (a, b) in adv.iter().zip(gae_oracle(&r, &v, &d, boot, 0.97, 0.9)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn gae_returns_are_advantages_plus_values(
            r in proptest::collection::vec(-5.0f64..5.0, 1..20),
            seed in 0u64..1000,
        ) {
            let mut rng = Rng::new(seed);
            let v: Vec<f64> = r.iter().map(|_| rng.normal()).collect();
            let d: Vec<bool> = r.iter().map(|_| rng.uniform() < 0.2).collect();
            let (adv, ret) = gae(&r, &v, &d, 0.5, 0.99, 0.95).unwrap();
            for i in 0..r.len() {
                prop_assert_eq!(ret[i], adv[i] + v[i]);
            }
        }
    }

    fn tiny_agent(kind: AgentKind, obs: (usize, usize), actions: usize) -> Agent {
        let cfg = AgentConfig {
            kind,
            memory_model: MemoryModelConfig {
                vocab: 16,
                dim: 8,
                layers: 1,
                heads: 2,
                ff: 16,
                register_len: 8,
                ..MemoryModelConfig::default()
            },
            hidden: 16,
            beta: 10.0,
            ..AgentConfig::default()
        };
        Agent::new(cfg, obs, actions, 0, None).unwrap()
    }

    fn tiny_ppo() -> PpoConfig {
        PpoConfig {
            lr: 1e-2,
            rollout: 8,
            num_envs: 2,
            minibatches: 2,
            total_steps: 64,
            ..PpoConfig::default()
        }
    }

    /// A filled buffer from random play on the T-maze.
    fn random_buffer(agent: &Agent, seed: u64) -> RolloutBuffer {
        let mut rng = Rng::new(seed);
        let mut buffer = RolloutBuffer::new(2);
        let mut envs: Vec<_> = (0..2)
            .map(|_| EnvSpec::TMaze(crate::envs::TMazeConfig::new(2)).build())
            .collect();
        let mut states: Vec<_> = (0..2).map(|_| agent.initial_state(0)).collect();
        let mut percepts: Vec<_> = envs
            .iter_mut()
            .zip(states.iter_mut())
            .enumerate()
            .map(|(i, (e, s))| agent.perceive(s, &e.reset(i as u64)).unwrap())
            .collect();
        let mut starts = [true, true];
        for _ in 0..6 {
            let outs = agent.evaluate(&percepts).unwrap();
            for e in 0..2 {
                let (a, lp) = choose(&outs[e].logits, &mut rng, false);
                agent.commit(&mut states[e], a, &outs[e]);
                let s = envs[e].step(a).unwrap();
                buffer.push(&percepts[e], a, s.reward, s.done, lp, outs[e].value, starts[e]);
                if s.done {
                    states[e] = agent.initial_state(0);
                    percepts[e] = agent.perceive(&mut states[e], &envs[e].reset(rng.next_u64())).unwrap();
                    starts[e] = true;
                } else {
                    percepts[e] = agent.perceive(&mut states[e], &s.observation).unwrap();
                    starts[e] = false;
                }
            }
        }
        let boot: Vec<f64> = agent.evaluate(&percepts).unwrap().iter().map(|o| o.value).collect();
        buffer.finish(&boot, 0.99, 0.95).unwrap();
        buffer
    }

    #[test]
    fn first_ratio_is_one_and_frozen_parts_untouched() {
        for kind in [AgentKind::Helm, AgentKind::Markov, AgentKind::Recurrent] {
            let mut agent = tiny_agent(kind, (3, 3), 4);
            let buffer = random_buffer(&agent, 1);
            let frozen = agent.frozen_digest();
            let before = agent.params().clone();
            let cfg = tiny_ppo();
            let mut opt = OptimizerState::new(cfg.optimizer());
            let stats = ppo_update(&mut agent, &buffer, &cfg, &mut opt, &mut Rng::new(2)).unwrap();
            assert!(
                stats.first_ratio_deviation < 1e-9,
                "{kind}: {}",
                stats.first_ratio_deviation
            );
            assert_eq!(agent.frozen_digest(), frozen);
            assert_ne!(agent.params(), &before);
        }
    }

    #[test]
    fn zero_advantages_give_no_policy_gradient() {
        let agent = tiny_agent(AgentKind::Helm, (3, 3), 4);
        let mut buffer = random_buffer(&agent, 3);
        buffer.advantages.iter_mut().for_each(|a| *a = 0.0);
        let mb = Minibatch {
            index: (0..buffer.len()).collect(),
            envs: None,
            advantages: vec![0.0; buffer.len()],
        };
        let mut tape = Tape::new();
        let bound = tape.bind(agent.params());
        let loss = ppo_loss(&agent, &mut tape, &bound, &buffer, &mb, &tiny_ppo()).unwrap();
        tape.backward_scalar(loss.policy).unwrap();
        for (_, g) in tape.grads_for(&bound).unwrap() {
            assert!(g.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn clipped_and_unclipped_coincide_at_unit_ratio() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Array::matrix(3, 2, vec![0.1, -0.3, 0.7, 0.2, -1.0, 0.5]).unwrap());
        let values = tape.leaf(Array::vector(vec![0.0, 0.1, 0.2]));
        let lp = |l: &[f64], a: usize| l[a] - crate::ndiff::log_sum_exp(l);
        let old = vec![lp(&[0.1, -0.3], 0), lp(&[0.7, 0.2], 1), lp(&[-1.0, 0.5], 1)];
        let adv = [1.0, -2.0, 0.5];
        let loss = surrogate_loss(
            &mut tape,
            logits,
            values,
            &[0, 1, 1],
            &old,
            &adv,
            &[0.0; 3],
            &tiny_ppo(),
        )
        .unwrap();
        let pl = tape.value(loss.policy).item();
        assert!((pl - (-(1.0 - 2.0 + 0.5) / 3.0)).abs() < 1e-12);
        assert!(tape.value(loss.ratio).data().iter().all(|r| (r - 1.0).abs() < 1e-15));
    }

    #[test]
    fn single_step_update_follows_advantage_sign() {
        for sign in [1.0, -1.0] {
            let mut agent = tiny_agent(AgentKind::Markov, (1, 1), 2);
            let mut buffer = RolloutBuffer::new(1);
            let mut state = agent.initial_state(0);
            let obs = Observation {
                height: 1,
                width: 1,
                cells: vec![0],
            };
            let p = agent.perceive(&mut state, &obs).unwrap();
            let out = agent.evaluate(std::slice::from_ref(&p)).unwrap().remove(0);
            buffer.push(&p, 0, sign, true, (0.5f64).ln(), out.value, true);
            buffer.finish(&[0.0], 0.99, 0.95).unwrap();
            buffer.advantages = vec![sign];
            let cfg = PpoConfig {
                epochs: 1,
                minibatches: 1,
                ent_coef: 0.0,
                normalize_advantages: false,
                lr: 1e-2,
                ..PpoConfig::default()
            };
            let mut opt = OptimizerState::new(cfg.optimizer());
            ppo_update(&mut agent, &buffer, &cfg, &mut opt, &mut Rng::new(0)).unwrap();
            let after = agent.evaluate(&[p]).unwrap().remove(0);
            let gap = after.logits[0] - after.logits[1];
            assert!(gap * sign > 0.0, "sign {sign}: gap {gap}");
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut agent = tiny_agent(AgentKind::Markov, (3, 3), 4);
        let mut buffer = random_buffer(&agent, 5);
        buffer.returns[0] = f64::NAN;
        let cfg = tiny_ppo();
        let mut opt = OptimizerState::new(cfg.optimizer());
        let err = ppo_update(&mut agent, &buffer, &cfg, &mut opt, &mut Rng::new(0)).unwrap_err();
        assert!(
            matches!(err, Error::NonFiniteLoss(ref m) if m.contains("epoch 0")),
            "{err}"
        );
    }

    fn unit_config(total: u64) -> TrainConfig {
        TrainConfig {
            env: EnvSpec::Unit,
            agent: tiny_agent(AgentKind::Helm, (1, 1), 2).config().clone(),
            ppo: PpoConfig {
                total_steps: total,
                ..tiny_ppo()
            },
            seed: 3,
            method: "helm".into(),
            checkpoint_every: 1,
        }
    }

    #[test]
    fn zero_budget_writes_only_the_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&unit_config(0), None, Some(dir.path())).unwrap();
        assert!(out.record.points.is_empty());
        let mut files: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        files.sort();
        assert_eq!(files, ["ckpt_0000000000.helm", "curve.csv"]);
        let text = fs::read_to_string(dir.path().join("curve.csv")).unwrap();
        assert_eq!(text, "step,episode,return,length,seed\n");
    }

    #[test]
    fn unit_env_returns_one_from_the_start() {
        let out = train(&unit_config(64), None, None).unwrap();
        assert_eq!(out.record.points.len(), 64);
        assert!(out.record.points.iter().all(|p| p.ret == 1.0 && p.length == 1));
        assert!(out.record.points.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn training_is_reproducible() {
        let mut cfg = unit_config(48);
        cfg.env = EnvSpec::TMaze(crate::envs::TMazeConfig::new(2));
        let a = train(&cfg, None, None).unwrap();
        let b = train(&cfg, None, None).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.agent.params(), b.agent.params());
        cfg.seed += 1;
        let c = train(&cfg, None, None).unwrap();
        assert_ne!(a.agent.params(), c.agent.params());
    }

    #[test]
    fn config_validation() {
        let mut cfg = PpoConfig::default();
        cfg.gamma = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PpoConfig::default();
        cfg.clip = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PpoConfig::default();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let key = PpoConfig::for_env(&EnvSpec::KeyCorridor(crate::envs::KeyCorridorConfig::default()));
        assert_eq!((key.rollout, key.ent_coef, key.lambda), (128, 5e-2, 0.99));
    }
}
