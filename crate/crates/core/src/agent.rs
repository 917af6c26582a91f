//! Actor-critic agents. The HELM agent maps each observation through the
//! frozen FrozenHopfield projection into token space, advances the frozen
//! memory with it and feeds `[h_t; enc(o_t)]` to trained actor and critic
//! heads. The baselines drop the memory (`markov`) or replace it with a
//! trained gated recurrent cell (`trained-recurrent`).

use std::fmt;
use std::str::FromStr;

use crate::envs::{Observation, OBJECT};
use crate::error::{Error, Result};
use crate::fhopfield::{FrozenHopfield, ProjectionMatrix};
use crate::memnet::{make_memory, Memory, MemoryKind, MemoryModel, MemoryModelConfig, MemoryState};
use crate::ndiff::{init_bias, init_dense, init_embedding, params_digest, Array, Bound, Params, Tape, Var};
use crate::rng::{sub_seed, Rng};

/// Number of distinct cell codes; the encoder sees one-hot cells.
pub const CELL_CODES: usize = OBJECT as usize + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentKind {
    Helm,
    Markov,
    Recurrent,
}

impl FromStr for AgentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "helm" => Ok(Self::Helm),
            "markov" => Ok(Self::Markov),
            "trained-recurrent" => Ok(Self::Recurrent),
            other => Err(Error::Config(format!("unknown agent kind '{other}'"))),
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Helm => "helm",
            Self::Markov => "markov",
            Self::Recurrent => "trained-recurrent",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub memory: MemoryKind,
    pub memory_model: MemoryModelConfig,
    /// FrozenHopfield inverse temperature.
    pub beta: f64,
    /// Hidden width of the encoder and of both heads.
    pub hidden: usize,
    /// Append a one-hot of the previous action to the FrozenHopfield input.
    pub action_input: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            kind: AgentKind::Helm,
            memory: MemoryKind::FrozenRandom,
            memory_model: MemoryModelConfig::default(),
            beta: 100.0,
            hidden: 128,
            action_input: false,
        }
    }
}

/// Per-episode agent state.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub memory: Option<MemoryState>,
    /// Recurrent baseline hidden state.
    pub hidden: Option<Vec<f64>>,
    pub prev_action: Option<usize>,
}

/// Network inputs for one step: the encoder input and the history vector
/// (memory output for HELM, previous hidden state for the recurrent
/// baseline, empty for the Markov agent).
#[derive(Clone, Debug, PartialEq)]
pub struct Percept {
    pub enc_in: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub value: f64,
    /// History features used by the heads (`h_t`).
    pub h: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentOutput {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub h: Vec<f64>,
}

/// Tape nodes produced by [`Agent::forward`].
pub struct ForwardVars {
    pub logits: Var,
    /// `[B]`
    pub values: Var,
    /// History features fed to the heads, when the agent has any.
    pub h: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Agent {
    cfg: AgentConfig,
    obs_shape: (usize, usize),
    num_actions: usize,
    fh: Option<FrozenHopfield>,
    memory: Option<Memory>,
    params: Params,
}

/// One-hot cell codes, `cells * CELL_CODES` long.
pub fn one_hot_cells(obs: &Observation) -> Vec<f64> {
    let mut out = vec![0.0; obs.cells.len() * CELL_CODES];
    for (i, &c) in obs.cells.iter().enumerate() {
        out[i * CELL_CODES + (c as usize).min(CELL_CODES - 1)] = 1.0;
    }
    out
}

fn dense(params: &mut Params, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) {
    params.insert(format!("{name}.w"), init_dense(rng, fan_in, fan_out));
    params.insert(format!("{name}.b"), init_bias(rng, fan_in, fan_out));
}

impl Agent {
    pub fn new(
        cfg: AgentConfig,
        obs_shape: (usize, usize),
        num_actions: usize,
        seed: u64,
        pretrained: Option<&MemoryModel>,
    ) -> Result<Self> {
        cfg.memory_model.validate()?;
        if num_actions == 0 || obs_shape.0 * obs_shape.1 == 0 {
            return Err(Error::Config(
                "agent needs a non-empty observation and action set".into(),
            ));
        }
        if cfg.hidden == 0 || !(cfg.beta > 0.0 && cfg.beta.is_finite()) {
            return Err(Error::Config("agent hidden width and beta must be positive".into()));
        }
        let m = cfg.memory_model.dim;
        let cells = obs_shape.0 * obs_shape.1;
        let (fh, memory) = if cfg.kind == AgentKind::Helm {
            let memory = make_memory(
                cfg.memory,
                &cfg.memory_model,
                sub_seed(seed, "agent.memory"),
                pretrained,
            )?;
            let embeddings = match memory.model() {
                Some(model) => model.embeddings().clone(),
                None => init_embedding(
                    &mut Rng::for_component(seed, "agent.embeddings"),
                    cfg.memory_model.vocab,
                    m,
                ),
            };
            let fh_in = cells + if cfg.action_input { num_actions } else { 0 };
            let projection = ProjectionMatrix::sample(fh_in, m, sub_seed(seed, "agent.projection"));
            (
                Some(FrozenHopfield::new(embeddings, projection, cfg.beta)?),
                Some(memory),
            )
        } else {
            (None, None)
        };

        let mut rng = Rng::for_component(seed, "agent.init");
        let mut params = Params::new();
        let h = cfg.hidden;
        dense(&mut params, &mut rng, "enc.l1", cells * CELL_CODES, h);
        dense(&mut params, &mut rng, "enc.l2", h, m);
        let head_in = if cfg.kind == AgentKind::Markov { m } else { 2 * m };
        dense(&mut params, &mut rng, "actor.l1", head_in, h);
        dense(&mut params, &mut rng, "actor.l2", h, num_actions);
        // zero output layer: uniform initial policy
        params.insert("actor.l2.w".into(), Array::zeros(&[h, num_actions]));
        params.insert("actor.l2.b".into(), Array::zeros(&[num_actions]));
        dense(&mut params, &mut rng, "critic.l1", head_in, h);
        dense(&mut params, &mut rng, "critic.l2", h, 1);
        if cfg.kind == AgentKind::Recurrent {
            for gate in ["z", "r", "n"] {
                dense(&mut params, &mut rng, &format!("gru.w{gate}"), m, m);
                params.insert(format!("gru.u{gate}.w"), init_dense(&mut rng, m, m));
            }
        }
        Ok(Self {
            cfg,
            obs_shape,
            num_actions,
            fh,
            memory,
            params,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn kind(&self) -> AgentKind {
        self.cfg.kind
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn obs_shape(&self) -> (usize, usize) {
        self.obs_shape
    }

    /// Trainable parameters only.
    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn memory(&self) -> Option<&Memory> {
        self.memory.as_ref()
    }

    pub fn frozen_hopfield(&self) -> Option<&FrozenHopfield> {
        self.fh.as_ref()
    }

    pub fn history_dim(&self) -> usize {
        match self.cfg.kind {
            AgentKind::Markov => 0,
            _ => self.cfg.memory_model.dim,
        }
    }

    /// Width of `s̃_t`.
    pub fn feature_dim(&self) -> usize {
        self.history_dim() + self.cfg.memory_model.dim
    }

    /// SHA-256 over the projection, the embeddings and the memory weights.
    pub fn frozen_digest(&self) -> [u8; 32] {
        let mut frozen = Params::new();
        if let Some(fh) = &self.fh {
            frozen.insert("projection".into(), fh.projection().matrix().clone());
            frozen.insert("embeddings".into(), fh.embeddings().clone());
        }
        if let Some(mem) = &self.memory {
            frozen.insert(
                "memory".into(),
                Array::vector(mem.weights_digest().iter().map(|&b| b as f64).collect()),
            );
        }
        params_digest(&frozen)
    }

    pub fn initial_state(&self, episode_seed: u64) -> AgentState {
        AgentState {
            memory: self.memory.as_ref().map(|m| m.initial_state(episode_seed)),
            hidden: (self.cfg.kind == AgentKind::Recurrent).then(|| vec![0.0; self.cfg.memory_model.dim]),
            prev_action: None,
        }
    }

    /// Builds the network inputs for `obs`. For HELM this advances the frozen
    /// memory by one step.
    pub fn perceive(&self, state: &mut AgentState, obs: &Observation) -> Result<Percept> {
        let cells = self.obs_shape.0 * self.obs_shape.1;
        if obs.cells.len() != cells {
            return Err(Error::Dimension {
                expected: cells,
                got: obs.cells.len(),
            });
        }
        let enc_in = one_hot_cells(obs);
        let h = match self.cfg.kind {
            AgentKind::Markov => Vec::new(),
            AgentKind::Recurrent => state
                .hidden
                .clone()
                .ok_or_else(|| Error::Invalid("recurrent agent state without hidden vector".into()))?,
            AgentKind::Helm => {
                let fh = self.fh.as_ref().expect("helm agent has FrozenHopfield");
                let mut o = obs.flatten();
                if self.cfg.action_input {
                    let mut onehot = vec![0.0; self.num_actions];
                    if let Some(a) = state.prev_action {
                        onehot[a] = 1.0;
                    }
                    o.extend(onehot);
                }
                let x = fh.embed(&o)?;
                let mem = self.memory.as_ref().expect("helm agent has memory");
                let ms = state
                    .memory
                    .as_mut()
                    .ok_or_else(|| Error::Invalid("helm agent state without memory state".into()))?;
                mem.step(ms, &x)?
            }
        };
        Ok(Percept { enc_in, h })
    }

    /// Records the chosen action and the recurrent update in the state.
    pub fn commit(&self, state: &mut AgentState, action: usize, out: &PolicyOutput) {
        state.prev_action = Some(action);
        if self.cfg.kind == AgentKind::Recurrent {
            state.hidden = Some(out.h.clone());
        }
    }

    /// Gated recurrent update `h' = n + z (h - n)` for a batch.
    pub fn gru(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var) -> Result<Var> {
        let gate = |tape: &mut Tape, g: &str, h_in: Var| -> Result<Var> {
            let a = tape.linear(x, bound.get(&format!("gru.w{g}.w")), bound.get(&format!("gru.w{g}.b")))?;
            let b = tape.matmul(h_in, bound.get(&format!("gru.u{g}.w")))?;
            tape.add(a, b)
        };
        let z = gate(tape, "z", h)?;
        let z = tape.sigmoid(z);
        let r = gate(tape, "r", h)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let n = gate(tape, "n", rh)?;
        let n = tape.tanh(n);
        // h' = n + z (h - n)
        let d = tape.sub(h, n)?;
        let zd = tape.mul(z, d)?;
        tape.add(n, zd)
    }

    /// Encoder output `[B, m]`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, enc_in: Var) -> Result<Var> {
        let e = tape.linear(enc_in, bound.get("enc.l1.w"), bound.get("enc.l1.b"))?;
        let e = tape.relu(e);
        tape.linear(e, bound.get("enc.l2.w"), bound.get("enc.l2.b"))
    }

    /// Actor and critic on precomputed features `s̃: [B, feature_dim]`.
    pub fn heads(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<(Var, Var)> {
        let a = tape.linear(features, bound.get("actor.l1.w"), bound.get("actor.l1.b"))?;
        let a = tape.tanh(a);
        let logits = tape.linear(a, bound.get("actor.l2.w"), bound.get("actor.l2.b"))?;
        let c = tape.linear(features, bound.get("critic.l1.w"), bound.get("critic.l1.b"))?;
        let c = tape.tanh(c);
        let v = tape.linear(c, bound.get("critic.l2.w"), bound.get("critic.l2.b"))?;
        let rows = tape.value(v).rows();
        let values = tape.reshape(v, &[rows])?;
        Ok((logits, values))
    }

    /// Batched forward. `h` is the memory output (HELM) or the previous
    /// hidden state (recurrent); ignored for the Markov agent. The feature
    /// order is `[h_t; enc(o_t)]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, enc_in: Var, h: Option<Var>) -> Result<ForwardVars> {
        let enc = self.encode(tape, bound, enc_in)?;
        let h = match (self.cfg.kind, h) {
            (AgentKind::Markov, _) => None,
            (AgentKind::Helm, Some(h)) => Some(h),
            (AgentKind::Recurrent, Some(h_prev)) => Some(self.gru(tape, bound, enc, h_prev)?),
            (_, None) => return Err(Error::Invalid("agent forward needs history features".into())),
        };
        let features = match h {
            Some(h) => tape.concat(&[h, enc])?,
            None => enc,
        };
        let (logits, values) = self.heads(tape, bound, features)?;
        Ok(ForwardVars { logits, values, h })
    }

    fn stack(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Result<Array> {
        let data: Vec<f64> = rows.flatten().collect();
        Array::new(vec![data.len() / width.max(1), width], data)
    }

    /// Policy and value for a batch of percepts using the current weights.
    pub fn evaluate(&self, percepts: &[Percept]) -> Result<Vec<PolicyOutput>> {
        let b = percepts.len();
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let width = self.obs_shape.0 * self.obs_shape.1 * CELL_CODES;
        let enc_in = tape.constant(Self::stack(percepts.iter().map(|p| p.enc_in.clone()), width)?);
        let h = if self.history_dim() > 0 {
            let hd = self.history_dim();
            if percepts.iter().any(|p| p.h.len() != hd) {
                return Err(Error::Invalid("percept history has the wrong width".into()));
            }
            Some(tape.constant(Self::stack(percepts.iter().map(|p| p.h.clone()), hd)?))
        } else {
            None
        };
        let out = self.forward(&mut tape, &bound, enc_in, h)?;
        let logits = tape.value(out.logits);
        let values = tape.value(out.values);
        let hs = out.h.map(|h| tape.value(h).clone());
        Ok((0..b)
            .map(|i| PolicyOutput {
                logits: logits.row(i).to_vec(),
                value: values.data()[i],
                h: hs.as_ref().map_or_else(Vec::new, |h| h.row(i).to_vec()),
            })
            .collect())
    }

    /// One full step for a single environment: perceive, evaluate, choose.
    pub fn act(&self, obs: &Observation, state: &mut AgentState, rng: &mut Rng, greedy: bool) -> Result<AgentOutput> {
        let percept = self.perceive(state, obs)?;
        let out = self.evaluate(std::slice::from_ref(&percept))?.remove(0);
        let (action, log_prob) = choose(&out.logits, rng, greedy);
        if !out.value.is_finite() {
            return Err(Error::NonFiniteLoss(format!("value estimate {}", out.value)));
        }
        self.commit(state, action, &out);
        Ok(AgentOutput {
            action,
            log_prob,
            value: out.value,
            h: out.h,
        })
    }

    /// Trainable weights under `agent.`, frozen parts under `frozen.` and
    /// `memory.`, and the inverse temperature as a scalar.
    pub fn to_checkpoint(&self) -> Params {
        let mut out: Params = self
            .params
            .iter()
            .map(|(k, v)| (format!("agent.{k}"), v.clone()))
            .collect();
        if let Some(fh) = &self.fh {
            out.insert("frozen.projection".into(), fh.projection().matrix().clone());
            out.insert("frozen.embeddings".into(), fh.embeddings().clone());
            out.insert("frozen.beta".into(), Array::scalar(fh.beta()));
        }
        if let Some(model) = self.memory.as_ref().and_then(|m| m.model()) {
            for (k, v) in model.params() {
                out.insert(format!("memory.{k}"), v.clone());
            }
        }
        out
    }

    /// Rebuilds an agent from [`Agent::to_checkpoint`] output.
    pub fn from_checkpoint(
        cfg: AgentConfig,
        obs_shape: (usize, usize),
        num_actions: usize,
        checkpoint: &Params,
    ) -> Result<Self> {
        let section = |prefix: &str| -> Params {
            checkpoint
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect()
        };
        let memory_params = section("memory.");
        let pretrained = if memory_params.is_empty() {
            None
        } else {
            Some(MemoryModel::from_params(cfg.memory_model.clone(), memory_params)?)
        };
        // the memory kind is restored exactly: weights come from the checkpoint
        let mut restore = cfg.clone();
        if restore.kind == AgentKind::Helm && pretrained.is_some() {
            restore.memory = MemoryKind::Pretrained;
        }
        let mut agent = Agent::new(restore, obs_shape, num_actions, 0, pretrained.as_ref())?;
        if let Some(mem) = agent.memory.as_mut() {
            if let Memory::Transformer { kind, .. } = mem {
                *kind = cfg.memory;
            }
        }
        let trained = section("agent.");
        for (k, v) in agent.params.iter_mut() {
            let loaded = trained
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor 'agent.{k}'")))?;
            if loaded.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor 'agent.{k}' has shape {:?}, expected {:?}",
                    loaded.shape(),
                    v.shape()
                )));
            }
            *v = loaded.clone();
        }
        if let Some(fh) = agent.fh.as_ref() {
            let get = |k: &str| {
                checkpoint
                    .get(k)
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{k}'")))
            };
            let projection = ProjectionMatrix::from_matrix(get("frozen.projection")?, fh.projection().seed())?;
            let beta = get("frozen.beta")?.item();
            agent.fh = Some(FrozenHopfield::new(get("frozen.embeddings")?, projection, beta)?);
        }
        Ok(agent)
    }
}

/// Samples from (or, when `greedy`, takes the lowest-index argmax of) the
/// categorical distribution over `logits`. Returns the action and its
/// log-probability.
pub fn choose(logits: &[f64], rng: &mut Rng, greedy: bool) -> (usize, f64) {
    let lse = crate::ndiff::log_sum_exp(logits);
    let logp: Vec<f64> = logits.iter().map(|l| l - lse).collect();
    let action = if greedy {
        crate::hopfield::argmax_lowest(logits)
    } else {
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        rng.categorical(&probs)
    };
    (action, logp[action])
}

/// Builds a baseline agent from its name.
pub fn make_baseline(
    kind: &str,
    cfg: &AgentConfig,
    obs_shape: (usize, usize),
    num_actions: usize,
    seed: u64,
) -> Result<Agent> {
    let kind: AgentKind = kind.parse()?;
    if kind == AgentKind::Helm {
        return Err(Error::Config("'helm' is not a baseline kind".into()));
    }
    Agent::new(AgentConfig { kind, ..cfg.clone() }, obs_shape, num_actions, seed, None)
}
