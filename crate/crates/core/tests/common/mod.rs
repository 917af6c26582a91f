//! Finite-difference oracles shared by the gradient and acceptance tests.
#![allow(dead_code)]

use helm::agent::{Agent, AgentConfig, AgentKind, Percept};
use helm::memnet::MemoryModelConfig;
use helm::ndiff::{Array, Tape, Var};
use helm::ppo::{ppo_loss, Minibatch, PpoConfig, RolloutBuffer};
use helm::rng::Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;

/// `max_i |a_i - n_i| / max(max|a|, max|n|)` over the checked coordinates.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn random_array(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

/// Builds a graph over leaf inputs; the output may have any shape.
pub type Graph = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// Contracts the graph output with a fixed weight so that every output
/// element contributes to the checked scalar.
fn scalar_of(graph: &Graph, inputs: &[Array], weights: &Array, constant: bool) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|a| {
            if constant {
                tape.constant(a.clone())
            } else {
                tape.leaf(a.clone())
            }
        })
        .collect();
    let out = graph(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let s = tape.sum(prod);
    (tape, vars, s)
}

/// Central-difference check of the whole input gradient of `graph`.
pub fn check_graph(graph: &Graph, inputs: &[Array], rng: &mut Rng) -> f64 {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| probe.constant(a.clone())).collect();
    let raw = graph(&mut probe, &vars);
    let weights = random_array(rng, probe.value(raw).shape(), -1.0, 1.0);
    let (mut tape, vars, s) = scalar_of(graph, inputs, &weights, false);
    tape.backward_scalar(s).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        analytic.extend_from_slice(tape.grad(vars[k]).unwrap().data());
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[k].data_mut()[i] += delta;
                let (t, _, s) = scalar_of(graph, &shifted, &weights, true);
                t.value(s).item()
            };
            numeric.push((eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Samples inputs for one check point.
pub type Sampler = Box<dyn Fn(&mut Rng) -> Vec<Array>>;

pub struct Primitive {
    pub name: &'static str,
    pub sample: Sampler,
    pub graph: Graph,
}

fn away_from(x: f64, kinks: &[f64], margin: f64) -> f64 {
    let mut x = x;
    for &k in kinks {
        if (x - k).abs() < margin {
            x = k + margin * if x >= k { 1.0 } else { -1.0 } * 2.0;
        }
    }
    x
}

fn avoid(mut a: Array, kinks: &[f64]) -> Array {
    for v in a.data_mut() {
        *v = away_from(*v, kinks, 1e-2);
    }
    a
}

fn unary(name: &'static str, lo: f64, hi: f64, kinks: &'static [f64], f: fn(&mut Tape, Var) -> Var) -> Primitive {
    Primitive {
        name,
        sample: Box::new(move |rng| vec![avoid(random_array(rng, &[3, 4], lo, hi), kinks)]),
        graph: Box::new(move |t, v| f(t, v[0])),
    }
}

fn binary(
    name: &'static str,
    a: &'static [usize],
    b: &'static [usize],
    f: fn(&mut Tape, Var, Var) -> Var,
) -> Primitive {
    Primitive {
        name,
        sample: Box::new(move |rng| vec![random_array(rng, a, -2.0, 2.0), random_array(rng, b, -2.0, 2.0)]),
        graph: Box::new(move |t, v| f(t, v[0], v[1])),
    }
}

/// One entry per differentiable primitive and composite helper.
pub fn primitives() -> Vec<Primitive> {
    vec![
        binary("matmul", &[3, 4], &[4, 2], |t, a, b| t.matmul(a, b).unwrap()),
        binary("matmul_nt", &[3, 4], &[2, 4], |t, a, b| t.matmul_nt(a, b).unwrap()),
        binary("matmul_tn", &[4, 3], &[4, 2], |t, a, b| t.matmul_tn(a, b).unwrap()),
        binary("add", &[3, 4], &[3, 4], |t, a, b| t.add(a, b).unwrap()),
        binary("add_broadcast", &[3, 4], &[4], |t, a, b| t.add(a, b).unwrap()),
        binary("sub", &[3, 4], &[4], |t, a, b| t.sub(a, b).unwrap()),
        binary("mul", &[3, 4], &[3, 4], |t, a, b| t.mul(a, b).unwrap()),
        binary("mul_broadcast", &[3, 4], &[4], |t, a, b| t.mul(a, b).unwrap()),
        unary("scale", -2.0, 2.0, &[], |t, a| t.scale(a, -1.7)),
        unary("add_scalar", -2.0, 2.0, &[], |t, a| t.add_scalar(a, 0.3)),
        unary("neg", -2.0, 2.0, &[], |t, a| t.neg(a)),
        unary("relu", -2.0, 2.0, &[0.0], |t, a| t.relu(a)),
        unary("tanh", -2.0, 2.0, &[], |t, a| t.tanh(a)),
        unary("sigmoid", -3.0, 3.0, &[], |t, a| t.sigmoid(a)),
        unary("exp", -2.0, 2.0, &[], |t, a| t.exp(a)),
        unary("log", 0.2, 3.0, &[], |t, a| t.log(a)),
        unary("softmax", -3.0, 3.0, &[], |t, a| t.softmax(a)),
        unary("log_softmax", -3.0, 3.0, &[], |t, a| t.log_softmax(a)),
        unary("layer_norm", -2.0, 2.0, &[], |t, a| t.layer_norm(a, 1e-5)),
        unary("sum", -2.0, 2.0, &[], |t, a| t.sum(a)),
        unary("mean", -2.0, 2.0, &[], |t, a| t.mean(a)),
        unary("clamp", -2.0, 2.0, &[-0.5, 0.8], |t, a| t.clamp(a, -0.5, 0.8)),
        unary("reshape", -2.0, 2.0, &[], |t, a| t.reshape(a, &[2, 6]).unwrap()),
        unary("slice_cols", -2.0, 2.0, &[], |t, a| t.slice_cols(a, 1, 2).unwrap()),
        unary("slice_rows", -2.0, 2.0, &[], |t, a| t.slice_rows(a, 1, 2).unwrap()),
        unary("pick", -2.0, 2.0, &[], |t, a| t.pick(a, &[3, 0, 2]).unwrap()),
        unary("gather", -2.0, 2.0, &[], |t, a| {
            t.gather(a, vec![Some(5), None, Some(0), Some(5), Some(11), Some(7)], &[2, 3])
                .unwrap()
        }),
        unary("embedding", -2.0, 2.0, &[], |t, a| {
            t.embedding(a, &[2, 0, 2, 1]).unwrap()
        }),
        Primitive {
            name: "minimum",
            sample: Box::new(|rng| {
                let a = random_array(rng, &[3, 4], -2.0, 2.0);
                let mut b = random_array(rng, &[3, 4], -2.0, 2.0);
                for (x, y) in a.data().iter().zip(b.data_mut()) {
                    *y = away_from(*y, &[*x], 1e-2);
                }
                vec![a, b]
            }),
            graph: Box::new(|t, v| t.minimum(v[0], v[1]).unwrap()),
        },
        Primitive {
            name: "concat",
            sample: Box::new(|rng| {
                vec![
                    random_array(rng, &[3, 2], -2.0, 2.0),
                    random_array(rng, &[3, 4], -2.0, 2.0),
                    random_array(rng, &[3, 1], -2.0, 2.0),
                ]
            }),
            graph: Box::new(|t, v| t.concat(&[v[0], v[1], v[2]]).unwrap()),
        },
        Primitive {
            name: "concat_rows",
            sample: Box::new(|rng| {
                vec![
                    random_array(rng, &[2, 3], -2.0, 2.0),
                    random_array(rng, &[1, 3], -2.0, 2.0),
                ]
            }),
            graph: Box::new(|t, v| t.concat_rows(&[v[0], v[1], v[0]]).unwrap()),
        },
        Primitive {
            name: "linear",
            sample: Box::new(|rng| {
                vec![
                    random_array(rng, &[3, 4], -2.0, 2.0),
                    random_array(rng, &[4, 5], -1.0, 1.0),
                    random_array(rng, &[5], -1.0, 1.0),
                ]
            }),
            graph: Box::new(|t, v| t.linear(v[0], v[1], v[2]).unwrap()),
        },
        Primitive {
            name: "layer_norm_affine",
            sample: Box::new(|rng| {
                vec![
                    random_array(rng, &[3, 4], -2.0, 2.0),
                    random_array(rng, &[4], 0.5, 1.5),
                    random_array(rng, &[4], -1.0, 1.0),
                ]
            }),
            graph: Box::new(|t, v| t.layer_norm_affine(v[0], v[1], v[2], 1e-5).unwrap()),
        },
    ]
}

/// Largest relative error of `primitive` over `points` random inputs.
pub fn check_primitive(p: &Primitive, points: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    (0..points)
        .map(|_| {
            let inputs = (p.sample)(&mut rng);
            check_graph(&p.graph, &inputs, &mut rng)
        })
        .fold(0.0, f64::max)
}

// ---- PPO loss graph ----

pub fn small_agent(kind: AgentKind, seed: u64) -> Agent {
    let cfg = AgentConfig {
        kind,
        memory_model: MemoryModelConfig {
            vocab: 16,
            dim: 4,
            layers: 1,
            heads: 2,
            ff: 8,
            register_len: 4,
            ..MemoryModelConfig::default()
        },
        hidden: 6,
        beta: 10.0,
        ..AgentConfig::default()
    };
    Agent::new(cfg, (2, 2), 3, seed, None).unwrap()
}

fn randomize(agent: &mut Agent, rng: &mut Rng) {
    for v in agent.params_mut().values_mut() {
        for x in v.data_mut() {
            *x = rng.uniform_range(-0.8, 0.8);
        }
    }
}

/// A random finished buffer and one minibatch covering all of it, with
/// old log-probabilities chosen so that no ratio sits near a clip edge.
fn ppo_point(agent: &mut Agent, cfg: &PpoConfig, rng: &mut Rng) -> (RolloutBuffer, Minibatch) {
    let (envs, steps) = (2, 3);
    randomize(agent, rng);
    loop {
        let mut buffer = RolloutBuffer::new(envs);
        let enc_len = 4 * helm::agent::CELL_CODES;
        let h_len = agent.history_dim();
        for s in 0..steps {
            for _ in 0..envs {
                let mut enc_in = vec![0.0; enc_len];
                for c in 0..4 {
                    enc_in[c * helm::agent::CELL_CODES + rng.below(helm::agent::CELL_CODES)] = 1.0;
                }
                let percept = Percept {
                    enc_in,
                    h: (0..h_len).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
                };
                let done = rng.below(4) == 0;
                buffer.push(
                    &percept,
                    rng.below(3),
                    rng.uniform_range(-1.0, 1.0),
                    done,
                    0.0,
                    rng.uniform_range(-1.0, 1.0),
                    s == 0 || rng.below(4) == 0,
                );
            }
        }
        buffer.finish(&[0.3, -0.2], cfg.gamma, cfg.lambda).unwrap();
        let index: Vec<usize> = (0..buffer.len()).collect();
        let advantages = index.iter().map(|_| rng.uniform_range(-1.5, 1.5)).collect();
        let mb = Minibatch {
            index,
            envs: (agent.kind() == AgentKind::Recurrent).then(|| (0..envs).collect()),
            advantages,
        };
        // current log-probs, then shifted old ones
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(agent.params());
        let loss = ppo_loss(agent, &mut tape, &bound, &buffer, &mb, cfg).unwrap();
        let current: Vec<f64> = tape.value(loss.ratio).data().iter().map(|r| r.ln()).collect();
        for (i, lp) in current.iter().enumerate() {
            buffer.log_probs[i] = lp - rng.uniform_range(-0.4, 0.4);
        }
        let ratios: Vec<f64> = current
            .iter()
            .zip(&buffer.log_probs)
            .map(|(c, o)| (c - o).exp())
            .collect();
        let edge = |r: &f64| (r - (1.0 - cfg.clip)).abs() < 1e-2 || (r - (1.0 + cfg.clip)).abs() < 1e-2;
        if !ratios.iter().any(edge) {
            return (buffer, mb);
        }
    }
}

/// Relative error of the full PPO loss gradient with respect to every
/// trainable parameter at one random point.
pub fn check_ppo_point(kind: AgentKind, rng: &mut Rng) -> f64 {
    let mut agent = small_agent(kind, rng.next_u64());
    let cfg = PpoConfig::default();
    let (buffer, mb) = ppo_point(&mut agent, &cfg, rng);
    let mut tape = Tape::new();
    let bound = tape.bind(agent.params());
    let loss = ppo_loss(&agent, &mut tape, &bound, &buffer, &mb, &cfg).unwrap();
    tape.backward_scalar(loss.total).unwrap();
    let grads = tape.grads_for(&bound).unwrap();
    let value_at = |agent: &Agent| {
        let mut t = Tape::new();
        let b = t.bind_frozen(agent.params());
        let l = ppo_loss(agent, &mut t, &b, &buffer, &mb, &cfg).unwrap();
        t.value(l.total).item()
    };
    let names: Vec<String> = agent.params().keys().cloned().collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for name in names {
        for i in 0..agent.params()[&name].len() {
            let orig = agent.params()[&name].data()[i];
            agent.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig + FD_STEP;
            let up = value_at(&agent);
            agent.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig - FD_STEP;
            let down = value_at(&agent);
            agent.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig;
            analytic.push(grads[&name].data()[i]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    rel_err(&analytic, &numeric)
}
