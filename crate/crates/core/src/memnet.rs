//! Frozen history compression: a small causal transformer that runs one step
//! at a time over a per-layer key/value register, its language-model
//! pretraining on synthetic token streams, and the ablation memories.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ndiff::{
    adamw_step, clip_grad_norm, init_dense, init_embedding, params_digest, AdamWConfig, Array, Bound, OptimizerState,
    Params, Tape, Var,
};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;
/// Additive logit for masked attention entries; `exp` of it underflows to 0.
const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionScheme {
    /// One learned scalar per head and relative offset, added to the logits.
    RelativeBias,
    /// No positional information at all.
    None,
}

impl FromStr for PositionScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative-bias" => Ok(Self::RelativeBias),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown position scheme '{other}'"))),
        }
    }
}

impl fmt::Display for PositionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RelativeBias => "relative-bias",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    /// Attention window including the current step.
    pub register_len: usize,
    pub position: PositionScheme,
}

impl Default for MemoryModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            dim: 32,
            layers: 2,
            heads: 2,
            ff: 64,
            register_len: 32,
            position: PositionScheme::RelativeBias,
        }
    }
}

impl MemoryModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.dim == 0 || self.layers == 0 || self.heads == 0 || self.ff == 0 {
            return Err(Error::Config("memory model sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.register_len == 0 {
            return Err(Error::Config("register length must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Expected shape of every parameter.
    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (m, f) = (self.dim, self.ff);
        let mut out = vec![
            ("embed".to_string(), vec![self.vocab, m]),
            ("ln_f.b".to_string(), vec![m]),
            ("ln_f.g".to_string(), vec![m]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("l{l}.{s}");
            out.extend([
                (p("ln1.g"), vec![m]),
                (p("ln1.b"), vec![m]),
                (p("ln2.g"), vec![m]),
                (p("ln2.b"), vec![m]),
                (p("wq"), vec![m, m]),
                (p("wk"), vec![m, m]),
                (p("wv"), vec![m, m]),
                (p("wo"), vec![m, m]),
                (p("ff1.w"), vec![m, f]),
                (p("ff1.b"), vec![f]),
                (p("ff2.w"), vec![f, m]),
                (p("ff2.b"), vec![m]),
            ]);
            if self.position == PositionScheme::RelativeBias {
                out.push((p("rel"), vec![self.heads, self.register_len]));
            }
        }
        out
    }
}

/// The transformer memory. Weights are plain values; nothing here records
/// gradients except [`MemoryModel::clm_loss`] during pretraining.
#[derive(Clone, Debug)]
pub struct MemoryModel {
    cfg: MemoryModelConfig,
    params: Params,
}

/// Per-layer key/value cache, oldest first, at most `register_len - 1` long.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Register {
    pub keys: VecDeque<Vec<f64>>,
    pub values: VecDeque<Vec<f64>>,
}

/// Attention weights of one step: `[layer][head][position]` over the window,
/// oldest position first.
pub type StepAttention = Vec<Vec<Vec<f64>>>;

impl MemoryModel {
    /// Random initialization.
    pub fn new(cfg: MemoryModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::for_component(seed, "memnet.init");
        let mut params = Params::new();
        for (name, shape) in cfg.shapes() {
            let value = if name == "embed" || name.ends_with(".rel") {
                init_embedding(&mut rng, shape[0], shape[1])
            } else if name.ends_with(".g") {
                Array::full(&shape, 1.0)
            } else if shape.len() == 1 {
                Array::zeros(&shape)
            } else {
                init_dense(&mut rng, shape[0], shape[1])
            };
            params.insert(name, value);
        }
        Ok(Self { cfg, params })
    }

    /// Wraps existing weights after checking names and shapes.
    pub fn from_params(cfg: MemoryModelConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.shapes();
        if shapes.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "memory model expects {} tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in shapes {
            match params.get(&name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                Some(a) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}' has shape {:?}, expected {shape:?}",
                        a.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor '{name}'"))),
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &MemoryModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Token embedding matrix `E`, `[vocab, dim]`.
    pub fn embeddings(&self) -> &Array {
        &self.params["embed"]
    }

    pub fn digest(&self) -> [u8; 32] {
        params_digest(&self.params)
    }

    fn p(&self, name: &str) -> &Array {
        &self.params[name]
    }

    pub fn empty_state(&self) -> Vec<Register> {
        vec![Register::default(); self.cfg.layers]
    }

    /// One streaming step: attends over the register plus the current input,
    /// returns the top-layer summary and appends this step's keys and values.
    pub fn step(&self, registers: &mut [Register], x: &[f64]) -> Result<Vec<f64>> {
        self.step_inner(registers, x, None)
    }

    /// [`MemoryModel::step`] that also reports the attention weights.
    pub fn step_traced(&self, registers: &mut [Register], x: &[f64]) -> Result<(Vec<f64>, StepAttention)> {
        let mut trace = Vec::with_capacity(self.cfg.layers);
        let h = self.step_inner(registers, x, Some(&mut trace))?;
        Ok((h, trace))
    }

    fn step_inner(
        &self,
        registers: &mut [Register],
        x: &[f64],
        mut trace: Option<&mut StepAttention>,
    ) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        let m = cfg.dim;
        if x.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: x.len(),
            });
        }
        if registers.len() != cfg.layers {
            return Err(Error::Invalid(format!(
                "memory state has {} layers, model has {}",
                registers.len(),
                cfg.layers
            )));
        }
        let d = cfg.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut u = x.to_vec();
        for (l, reg) in registers.iter_mut().enumerate() {
            let name = |s: &str| format!("l{l}.{s}");
            let n = ln_affine(&u, self.p(&name("ln1.g")), self.p(&name("ln1.b")));
            let q = vec_mat(&n, self.p(&name("wq")));
            let k = vec_mat(&n, self.p(&name("wk")));
            let v = vec_mat(&n, self.p(&name("wv")));
            let past = reg.keys.len();
            let rel = self.params.get(&name("rel"));
            let mut heads_out = vec![0.0; m];
            let mut layer_trace = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let cols = h * d..(h + 1) * d;
                let qh = &q[cols.clone()];
                let mut logits = Vec::with_capacity(past + 1);
                for j in 0..=past {
                    let kj = if j < past { &reg.keys[j] } else { &k };
                    let mut s = dot(qh, &kj[cols.clone()]) * scale;
                    if let Some(rel) = rel {
                        s += rel.data()[h * cfg.register_len + (past - j)];
                    }
                    logits.push(s);
                }
                crate::ndiff::softmax_in_place(&mut logits);
                let out = &mut heads_out[cols.clone()];
                for (j, &w) in logits.iter().enumerate() {
                    let vj = if j < past { &reg.values[j] } else { &v };
                    for (o, &vv) in out.iter_mut().zip(&vj[cols.clone()]) {
                        *o += w * vv;
                    }
                }
                layer_trace.push(logits);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(layer_trace);
            }
            let attn = vec_mat(&heads_out, self.p(&name("wo")));
            add_into(&mut u, &attn);
            let n2 = ln_affine(&u, self.p(&name("ln2.g")), self.p(&name("ln2.b")));
            let mut f1 = vec_mat(&n2, self.p(&name("ff1.w")));
            add_into(&mut f1, self.p(&name("ff1.b")).data());
            f1.iter_mut().for_each(|z| *z = z.max(0.0));
            let mut f2 = vec_mat(&f1, self.p(&name("ff2.w")));
            add_into(&mut f2, self.p(&name("ff2.b")).data());
            add_into(&mut u, &f2);

            reg.keys.push_back(k);
            reg.values.push_back(v);
            while reg.keys.len() > cfg.register_len - 1 {
                reg.keys.pop_front();
                reg.values.pop_front();
            }
        }
        Ok(ln_affine(&u, self.p("ln_f.g"), self.p("ln_f.b")))
    }

    /// Additive attention bias `[T, T]` for one head: relative-position term
    /// inside the causal window of width `register_len`, masked elsewhere.
    fn bias_matrices(&self, tape: &mut Tape, bound: &Bound, l: usize, t: usize) -> Result<Vec<Var>> {
        let window = self.cfg.register_len;
        let mut mask = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                if j > i || i - j >= window {
                    mask[i * t + j] = MASKED;
                }
            }
        }
        let mask = tape.constant(Array::new(vec![t, t], mask)?);
        let mut out = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            match bound.try_get(&format!("l{l}.rel")) {
                Some(rel) => {
                    let index = (0..t * t)
                        .map(|e| {
                            let (i, j) = (e / t, e % t);
                            (j <= i && i - j < window).then(|| h * window + (i - j))
                        })
                        .collect();
                    let b = tape.gather(rel, index, &[t, t])?;
                    out.push(tape.add(b, mask)?);
                }
                None => out.push(mask),
            }
        }
        Ok(out)
    }

    /// Full-sequence forward over `batch` sequences of length `t`, stacked
    /// as rows of `x: [batch * t, dim]`. Returns the final-normalized
    /// top-layer activations with the same layout. Position `i` attends to
    /// positions `i - register_len + 1 ..= i` of its own sequence.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &Bound, x: Var, batch: usize, t: usize) -> Result<Var> {
        let cfg = &self.cfg;
        let (m, d) = (cfg.dim, cfg.head_dim());
        let shape = tape.value(x).shape().to_vec();
        if shape != [batch * t, m] {
            return Err(Error::Shape {
                op: "memnet forward",
                lhs: shape,
                rhs: vec![batch * t, m],
            });
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut u = x;
        for l in 0..cfg.layers {
            let g = |s: &str| bound.get(&format!("l{l}.{s}"));
            let n = tape.layer_norm_affine(u, g("ln1.g"), g("ln1.b"), LN_EPS)?;
            let q = tape.matmul(n, g("wq"))?;
            let k = tape.matmul(n, g("wk"))?;
            let v = tape.matmul(n, g("wv"))?;
            let bias = self.bias_matrices(tape, bound, l, t)?;
            let mut per_seq = Vec::with_capacity(batch);
            for b in 0..batch {
                let mut heads = Vec::with_capacity(cfg.heads);
                for (h, &bias_h) in bias.iter().enumerate() {
                    let block = |tape: &mut Tape, a: Var| {
                        let index = (0..t * d).map(|e| Some((b * t + e / d) * m + h * d + e % d)).collect();
                        tape.gather(a, index, &[t, d])
                    };
                    let qh = block(tape, q)?;
                    let kh = block(tape, k)?;
                    let vh = block(tape, v)?;
                    let s = tape.matmul_nt(qh, kh)?;
                    let s = tape.scale(s, scale);
                    let s = tape.add(s, bias_h)?;
                    let p = tape.softmax(s);
                    heads.push(tape.matmul(p, vh)?);
                }
                per_seq.push(tape.concat(&heads)?);
            }
            // [t, batch * m] back to [batch * t, m]
            let wide = tape.concat(&per_seq)?;
            let index = (0..batch * t * m)
                .map(|e| {
                    let (row, c) = (e / m, e % m);
                    let (b, i) = (row / t, row % t);
                    Some(i * batch * m + b * m + c)
                })
                .collect();
            let o = tape.gather(wide, index, &[batch * t, m])?;
            let attn = tape.matmul(o, g("wo"))?;
            u = tape.add(u, attn)?;
            let n2 = tape.layer_norm_affine(u, g("ln2.g"), g("ln2.b"), LN_EPS)?;
            let f = tape.linear(n2, g("ff1.w"), g("ff1.b"))?;
            let f = tape.relu(f);
            let f = tape.linear(f, g("ff2.w"), g("ff2.b"))?;
            u = tape.add(u, f)?;
        }
        tape.layer_norm_affine(u, bound.get("ln_f.g"), bound.get("ln_f.b"), LN_EPS)
    }

    /// Full-sequence forward of one input sequence `[T, dim]` without
    /// recording gradients for the weights.
    pub fn forward(&self, xs: &Array) -> Result<Array> {
        if xs.rank() != 2 {
            return Err(Error::Invalid("memnet forward expects a [T, dim] array".into()));
        }
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let x = tape.constant(xs.clone());
        let h = self.forward_tape(&mut tape, &bound, x, 1, xs.rows())?;
        Ok(tape.value(h).clone())
    }

    /// Mean next-token cross-entropy over `windows` (each of equal length),
    /// counting positions `>= skip` only. Returns the scalar loss node.
    pub fn clm_loss(&self, tape: &mut Tape, bound: &Bound, windows: &[&[usize]], skip: usize) -> Result<Var> {
        let t = windows[0].len() - 1;
        if windows.iter().any(|w| w.len() != t + 1) || t == 0 || skip >= t {
            return Err(Error::Invalid(
                "clm_loss: windows must share a length > skip + 1".into(),
            ));
        }
        let inputs: Vec<usize> = windows.iter().flat_map(|w| w[..t].iter().copied()).collect();
        let embed = bound.get("embed");
        let x = tape.embedding(embed, &inputs)?;
        let h = self.forward_tape(tape, bound, x, windows.len(), t)?;
        let logits = tape.matmul_nt(h, embed)?;
        let logp = tape.log_softmax(logits);
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        for (b, w) in windows.iter().enumerate() {
            for i in skip..t {
                rows.push(b * t + i);
                cols.push(w[i + 1]);
            }
        }
        let v = self.cfg.vocab;
        let index = rows.iter().zip(&cols).map(|(&r, &c)| Some(r * v + c)).collect();
        let picked = tape.gather(logp, index, &[rows.len()])?;
        let mean = tape.mean(picked);
        Ok(tape.neg(mean))
    }

    /// Per-layer, per-head `T x T` attention matrices for an episode of
    /// token-space inputs. Rows are the causal attention distributions.
    pub fn attention_maps(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<Array>>> {
        let t = xs.len();
        if t == 0 {
            return Err(Error::Invalid("attention maps need at least one step".into()));
        }
        if t > self.cfg.register_len {
            return Err(Error::Invalid(format!(
                "episode of {t} steps exceeds the register length {}",
                self.cfg.register_len
            )));
        }
        let mut maps = vec![vec![Array::zeros(&[t, t]); self.cfg.heads]; self.cfg.layers];
        let mut regs = self.empty_state();
        for (i, x) in xs.iter().enumerate() {
            let (_, trace) = self.step_traced(&mut regs, x)?;
            for (l, layer) in trace.iter().enumerate() {
                for (h, row) in layer.iter().enumerate() {
                    maps[l][h].row_mut(i)[..=i].copy_from_slice(row);
                }
            }
        }
        Ok(maps)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn vec_mat(x: &[f64], w: &Array) -> Vec<f64> {
    let cols = w.cols();
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn ln_affine(x: &[f64], g: &Array, b: &Array) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(g.data().iter().zip(b.data()))
        .map(|(v, (gg, bb))| (v - mean) * inv * gg + bb)
        .collect()
}

// ---- corpora and pretraining ----

/// Row-stochastic transition matrix of an order-1 Markov chain.
#[derive(Clone, Debug)]
pub struct MarkovChain {
    pub transition: Vec<Vec<f64>>,
}

impl MarkovChain {
    /// Rows drawn from a symmetric Dirichlet(alpha) via normalized gamma
    /// variates (alpha = 1 uses exponentials).
    pub fn random(vocab: usize, sparsity: usize, seed: u64) -> Self {
        let mut rng = Rng::for_component(seed, "memnet.markov");
        let transition = (0..vocab)
            .map(|_| {
                let mut row = vec![0.0; vocab];
                // each token has `sparsity` possible successors
                let mut ids: Vec<usize> = (0..vocab).collect();
                rng.shuffle(&mut ids);
                for &j in ids.iter().take(sparsity.clamp(1, vocab)) {
                    row[j] = -(1.0 - rng.uniform()).ln();
                }
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= s);
                row
            })
            .collect();
        Self { transition }
    }

    pub fn vocab(&self) -> usize {
        self.transition.len()
    }

    /// Stationary distribution by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let k = self.vocab();
        let mut pi = vec![1.0 / k as f64; k];
        for _ in 0..10_000 {
            let mut next = vec![0.0; k];
            for (i, row) in self.transition.iter().enumerate() {
                for (j, &p) in row.iter().enumerate() {
                    next[j] += pi[i] * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats: `sum_i pi_i H(T_i)`.
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        pi.iter()
            .zip(&self.transition)
            .map(|(p, row)| p * row.iter().filter(|&&q| q > 0.0).map(|q| -q * q.ln()).sum::<f64>())
            .sum()
    }

    pub fn sample(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut s = rng.below(self.vocab());
        for _ in 0..len {
            out.push(s);
            s = rng.categorical(&self.transition[s]);
        }
        out
    }
}

/// Token stream for language-model pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: usize,
    pub tokens: Vec<usize>,
}

impl Corpus {
    pub fn new(vocab: usize, tokens: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Invalid(format!("token {bad} outside vocabulary of {vocab}")));
        }
        Ok(Self { vocab, tokens })
    }

    /// `0, 1, .., period - 1, 0, 1, ..`
    pub fn cyclic(vocab: usize, period: usize, len: usize) -> Result<Self> {
        Self::new(vocab, (0..len).map(|i| i % period).collect())
    }

    pub fn markov(chain: &MarkovChain, len: usize, seed: u64) -> Self {
        let mut rng = Rng::for_component(seed, "memnet.corpus");
        Self {
            vocab: chain.vocab(),
            tokens: chain.sample(len, &mut rng),
        }
    }

    /// The default pretraining text: a sparse Markov chain with fixed motifs
    /// of length 8 spliced in at random places.
    pub fn synthetic(vocab: usize, len: usize, seed: u64) -> Self {
        let chain = MarkovChain::random(vocab, 4, seed);
        let mut rng = Rng::for_component(seed, "memnet.motifs");
        let motifs: Vec<Vec<usize>> = (0..4).map(|_| (0..8).map(|_| rng.below(vocab)).collect()).collect();
        let base = chain.sample(len, &mut rng);
        let mut tokens = Vec::with_capacity(len);
        let mut i = 0;
        while tokens.len() < len {
            if rng.uniform() < 0.05 {
                tokens.extend_from_slice(&motifs[rng.below(motifs.len())]);
            } else {
                tokens.push(base[i % base.len()]);
                i += 1;
            }
        }
        tokens.truncate(len);
        Self { vocab, tokens }
    }

    /// Splits off the last `fraction` of tokens as held-out text.
    pub fn split(&self, fraction: f64) -> (Corpus, Corpus) {
        let cut = ((1.0 - fraction) * self.tokens.len() as f64).round() as usize;
        (
            Corpus {
                vocab: self.vocab,
                tokens: self.tokens[..cut].to_vec(),
            },
            Corpus {
                vocab: self.vocab,
                tokens: self.tokens[cut..].to_vec(),
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Input positions per training window (at most the register length).
    pub seq_len: usize,
    pub optimizer: AdamWConfig,
    pub clip: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            seq_len: 32,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

/// Causal language-model pretraining with AdamW on random windows of the
/// corpus. The loss skips the first position of each window, which has no
/// context.
pub fn pretrain_clm(model: &mut MemoryModel, corpus: &Corpus, cfg: &PretrainConfig) -> Result<PretrainReport> {
    if corpus.vocab > model.cfg.vocab {
        return Err(Error::Invalid(format!(
            "corpus vocabulary {} exceeds the model vocabulary {}",
            corpus.vocab, model.cfg.vocab
        )));
    }
    Corpus::new(model.cfg.vocab, corpus.tokens.clone())?;
    let t = cfg.seq_len.min(model.cfg.register_len);
    if corpus.tokens.len() < t + 1 {
        return Err(Error::Invalid("corpus shorter than one training window".into()));
    }
    let mut rng = Rng::for_component(cfg.seed, "memnet.pretrain");
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let starts: Vec<usize> = (0..cfg.batch).map(|_| rng.below(corpus.tokens.len() - t)).collect();
        let windows: Vec<&[usize]> = starts.iter().map(|&s| &corpus.tokens[s..s + t + 1]).collect();
        let mut tape = Tape::new();
        let bound = tape.bind(&model.params);
        let loss = model.clm_loss(&mut tape, &bound, &windows, 1)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(format!("clm loss {value}")));
        }
        tape.backward_scalar(loss)?;
        let mut grads = tape.grads_for(&bound)?;
        clip_grad_norm(&mut grads, cfg.clip);
        adamw_step(&mut model.params, &grads, &mut opt)?;
        losses.push(value);
    }
    Ok(PretrainReport { losses })
}

/// Held-out perplexity over non-overlapping windows of `seq_len + 1`
/// tokens, excluding each window's first prediction.
pub fn perplexity(model: &MemoryModel, corpus: &Corpus, seq_len: usize) -> Result<f64> {
    let t = seq_len.min(model.cfg.register_len);
    let windows: Vec<&[usize]> = corpus.tokens.chunks_exact(t + 1).collect();
    if windows.is_empty() {
        return Err(Error::Invalid("held-out corpus shorter than one window".into()));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(16) {
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&model.params);
        let loss = model.clm_loss(&mut tape, &bound, chunk, 1)?;
        total += tape.value(loss).item() * chunk.len() as f64;
    }
    Ok((total / windows.len() as f64).exp())
}

// ---- memory variants ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryKind {
    Pretrained,
    FrozenRandom,
    Noise,
    Positional,
}

impl FromStr for MemoryKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(Self::Pretrained),
            "frozen-random" => Ok(Self::FrozenRandom),
            "noise" => Ok(Self::Noise),
            "positional" => Ok(Self::Positional),
            other => Err(Error::Config(format!("unknown memory kind '{other}'"))),
        }
    }
}

impl fmt::Display for MemoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pretrained => "pretrained",
            Self::FrozenRandom => "frozen-random",
            Self::Noise => "noise",
            Self::Positional => "positional",
        })
    }
}

/// A frozen history compressor.
#[derive(Clone, Debug)]
pub enum Memory {
    Transformer {
        kind: MemoryKind,
        model: MemoryModel,
    },
    /// `h_t ~ N(0, I)` independently at every step.
    Noise {
        dim: usize,
    },
    /// Sinusoidal embedding of the step index.
    Positional {
        dim: usize,
    },
}

/// Per-episode state of a [`Memory`].
#[derive(Clone, Debug)]
pub enum MemoryState {
    Transformer { registers: Vec<Register>, steps: usize },
    Noise { rng: Rng, steps: usize },
    Positional { steps: usize },
}

impl MemoryState {
    pub fn steps(&self) -> usize {
        match self {
            Self::Transformer { steps, .. } | Self::Noise { steps, .. } | Self::Positional { steps } => *steps,
        }
    }
}

/// Builds a memory variant. `pretrained` supplies the weights for
/// [`MemoryKind::Pretrained`]; the other kinds ignore it.
pub fn make_memory(
    kind: MemoryKind,
    cfg: &MemoryModelConfig,
    seed: u64,
    pretrained: Option<&MemoryModel>,
) -> Result<Memory> {
    cfg.validate()?;
    match kind {
        MemoryKind::Pretrained => {
            let model = pretrained
                .ok_or_else(|| Error::Config("pretrained memory requires a model checkpoint".into()))?
                .clone();
            if model.config() != cfg {
                return Err(Error::Config(format!(
                    "checkpoint config {:?} does not match {:?}",
                    model.config(),
                    cfg
                )));
            }
            Ok(Memory::Transformer { kind, model })
        }
        MemoryKind::FrozenRandom => Ok(Memory::Transformer {
            kind,
            model: MemoryModel::new(cfg.clone(), seed)?,
        }),
        MemoryKind::Noise => Ok(Memory::Noise { dim: cfg.dim }),
        MemoryKind::Positional => Ok(Memory::Positional { dim: cfg.dim }),
    }
}

/// `pe[2i] = sin(t / 10000^(2i/m))`, `pe[2i+1] = cos(..)`.
pub fn sinusoidal(t: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let freq = 10000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
            let angle = t as f64 * freq;
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl Memory {
    pub fn kind(&self) -> MemoryKind {
        match self {
            Self::Transformer { kind, .. } => *kind,
            Self::Noise { .. } => MemoryKind::Noise,
            Self::Positional { .. } => MemoryKind::Positional,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Transformer { model, .. } => model.config().dim,
            Self::Noise { dim } | Self::Positional { dim } => *dim,
        }
    }

    pub fn model(&self) -> Option<&MemoryModel> {
        match self {
            Self::Transformer { model, .. } => Some(model),
            _ => None,
        }
    }

    pub fn initial_state(&self, episode_seed: u64) -> MemoryState {
        match self {
            Self::Transformer { model, .. } => MemoryState::Transformer {
                registers: model.empty_state(),
                steps: 0,
            },
            Self::Noise { .. } => MemoryState::Noise {
                rng: Rng::for_component(episode_seed, "memnet.noise"),
                steps: 0,
            },
            Self::Positional { .. } => MemoryState::Positional { steps: 0 },
        }
    }

    pub fn step(&self, state: &mut MemoryState, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        match (self, state) {
            (Self::Transformer { model, .. }, MemoryState::Transformer { registers, steps }) => {
                *steps += 1;
                model.step(registers, x)
            }
            (Self::Noise { dim }, MemoryState::Noise { rng, steps }) => {
                *steps += 1;
                Ok((0..*dim).map(|_| rng.normal()).collect())
            }
            (Self::Positional { dim }, MemoryState::Positional { steps }) => {
                let h = sinusoidal(*steps, *dim);
                *steps += 1;
                Ok(h)
            }
            _ => Err(Error::Invalid("memory state belongs to a different memory kind".into())),
        }
    }

    /// SHA-256 of the frozen weights (of the kind tag for weightless kinds).
    pub fn weights_digest(&self) -> [u8; 32] {
        match self {
            Self::Transformer { model, .. } => model.digest(),
            other => {
                use sha2::{Digest, Sha256};
                let mut h = Sha256::new();
                h.update(other.kind().to_string().as_bytes());
                h.update((other.dim() as u64).to_le_bytes());
                h.finalize().into()
            }
        }
    }
}

// ---- attention map export ----

/// Writes an 8-bit binary PGM with pixel `round(255 * w)`.
pub fn write_pgm(path: &Path, map: &Array) -> Result<()> {
    let (h, w) = (map.rows(), map.cols());
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes `layer{l}_head{h}.csv` and `.pgm` for every map into `dir`.
pub fn write_attention_maps(dir: &Path, maps: &[Vec<Array>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (l, layer) in maps.iter().enumerate() {
        for (h, map) in layer.iter().enumerate() {
            let stem = format!("layer{l}_head{h}");
            let mut text = String::new();
            for r in 0..map.rows() {
                let row: Vec<String> = map.row(r).iter().map(|v| format!("{v}")).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            fs::write(dir.join(format!("{stem}.csv")), text)?;
            write_pgm(&dir.join(format!("{stem}.pgm")), map)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(layers: usize, register_len: usize) -> MemoryModelConfig {
        MemoryModelConfig {
            vocab: 11,
            dim: 8,
            layers,
            heads: 2,
            ff: 12,
            register_len,
            position: PositionScheme::RelativeBias,
        }
    }

    /// Random model with non-trivial norms and position biases.
    fn model(cfg: MemoryModelConfig, seed: u64) -> MemoryModel {
        let mut m = MemoryModel::new(cfg, seed).unwrap();
        let mut rng = Rng::new(seed ^ 0xabc);
        for (name, a) in m.params_mut().iter_mut() {
            if name.ends_with(".rel") || name.ends_with(".g") || name.ends_with(".b") {
                a.data_mut().iter_mut().for_each(|v| *v += rng.gaussian(0.0, 0.5));
            }
        }
        m
    }

    fn inputs(t: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::new(seed);
        (0..t).map(|_| (0..m).map(|_| rng.normal()).collect()).collect()
    }

    fn stream(model: &MemoryModel, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut regs = model.empty_state();
        xs.iter().map(|x| model.step(&mut regs, x).unwrap()).collect()
    }

    #[test]
    fn first_step_is_a_length_one_forward() {
        let m = model(small(2, 6), 1);
        let xs = inputs(1, 8, 2);
        let h = stream(&m, &xs);
        let full = m.forward(&Array::from_rows(&xs).unwrap()).unwrap();
        for (a, b) in h[0].iter().zip(full.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn streaming_matches_full_sequence() {
        for seed in 0..10 {
            let m = model(small(2, 6), seed);
            for t in 1..=6 {
                let xs = inputs(t, 8, seed + 100);
                let h = stream(&m, &xs);
                let full = m.forward(&Array::from_rows(&xs).unwrap()).unwrap();
                for i in 0..t {
                    for (a, b) in h[i].iter().zip(full.row(i)) {
                        assert!((a - b).abs() < 1e-8, "seed {seed} t {t} pos {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn streaming_matches_windowed_forward_beyond_register() {
        let m = model(small(2, 4), 3);
        let xs = inputs(11, 8, 4);
        let h = stream(&m, &xs);
        let full = m.forward(&Array::from_rows(&xs).unwrap()).unwrap();
        for i in 0..11 {
            for (a, b) in h[i].iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn register_is_fifo_and_bounded() {
        let m = model(small(2, 4), 5);
        let mut regs = m.empty_state();
        for (i, x) in inputs(9, 8, 6).iter().enumerate() {
            m.step(&mut regs, x).unwrap();
            for r in &regs {
                assert_eq!(r.keys.len(), (i + 1).min(3));
            }
        }
    }

    #[test]
    fn causal_and_history_bounded() {
        let m = model(small(1, 4), 7);
        let xs = inputs(10, 8, 8);
        let h = stream(&m, &xs);
        // future perturbation
        let mut future = xs.clone();
        future[9][0] += 1.0;
        assert_eq!(stream(&m, &future)[..9], h[..9]);
        // single layer: inputs older than register_len - 1 steps are invisible
        let mut old = xs.clone();
        old[5][3] -= 2.0;
        assert_eq!(stream(&m, &old)[9], h[9]);
        old[6][3] -= 2.0;
        assert_ne!(stream(&m, &old)[9], h[9]);
    }

    #[test]
    fn deeper_models_see_layers_times_window_back() {
        let m = model(small(2, 4), 9);
        let xs = inputs(12, 8, 10);
        let h = stream(&m, &xs);
        let mut old = xs.clone();
        old[11 - 2 * 3 - 1][0] += 3.0;
        assert_eq!(stream(&m, &old)[11], h[11]);
        let mut old = xs.clone();
        old[11 - 2 * 3][0] += 3.0;
        assert_ne!(stream(&m, &old)[11], h[11]);
    }

    #[test]
    fn different_seeds_different_summaries() {
        let cfg = small(2, 6);
        let a = MemoryModel::new(cfg.clone(), 1).unwrap();
        let b = MemoryModel::new(cfg, 2).unwrap();
        let xs = inputs(3, 8, 0);
        assert_ne!(stream(&a, &xs), stream(&b, &xs));
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = model(small(1, 4), 0);
        let mut regs = m.empty_state();
        assert!(matches!(
            m.step(&mut regs, &[0.0; 5]),
            Err(Error::Dimension { expected: 8, got: 5 })
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(1, 4);
        cfg.heads = 3;
        assert!(matches!(MemoryModel::new(cfg, 0), Err(Error::Config(_))));
        let mut cfg = small(1, 4);
        cfg.register_len = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn attention_maps_are_causal_distributions() {
        let m = model(small(2, 6), 11);
        let maps = m.attention_maps(&inputs(5, 8, 12)).unwrap();
        assert_eq!(maps.len(), 2);
        for layer in &maps {
            assert_eq!(layer.len(), 2);
            for map in layer {
                for i in 0..5 {
                    let row = map.row(i);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(row[i + 1..].iter().all(|&w| w == 0.0));
                }
            }
        }
        let single = m.attention_maps(&inputs(1, 8, 13)).unwrap();
        assert_eq!(single[0][0].data(), &[1.0]);
        assert!(m.attention_maps(&inputs(7, 8, 14)).is_err());
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let map = Array::matrix(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.0, 0.002]).unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, &map).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 64, 0, 1]);
    }

    #[test]
    fn noise_memory_is_seeded() {
        let mem = make_memory(MemoryKind::Noise, &small(1, 4), 0, None).unwrap();
        let run = |seed| {
            let mut s = mem.initial_state(seed);
            (0..5).map(|_| mem.step(&mut s, &[0.0; 8]).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn positional_memory_is_injective() {
        let dim = 16;
        let mut seen: Vec<Vec<f64>> = Vec::with_capacity(10_000);
        for t in 0..10_000 {
            seen.push(sinusoidal(t, dim));
        }
        // sort lexicographically and compare neighbours
        let mut order: Vec<usize> = (0..seen.len()).collect();
        order.sort_by(|&a, &b| seen[a].partial_cmp(&seen[b]).unwrap());
        for w in order.windows(2) {
            let d: f64 = seen[w[0]].iter().zip(&seen[w[1]]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 1e-9, "steps {} and {} collide", w[0], w[1]);
        }
        let mem = make_memory(MemoryKind::Positional, &small(1, 4), 0, None).unwrap();
        let mut s = mem.initial_state(0);
        assert_eq!(mem.step(&mut s, &[0.0; 8]).unwrap(), sinusoidal(0, 8));
        assert_eq!(mem.step(&mut s, &[0.0; 8]).unwrap(), sinusoidal(1, 8));
    }

    #[test]
    fn unknown_kind_and_missing_checkpoint() {
        assert!(matches!("lstm".parse::<MemoryKind>(), Err(Error::Config(_))));
        assert!(make_memory(MemoryKind::Pretrained, &small(1, 4), 0, None).is_err());
        for k in ["pretrained", "frozen-random", "noise", "positional"] {
            assert_eq!(k.parse::<MemoryKind>().unwrap().to_string(), k);
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let cfg = small(1, 4);
        let noise = make_memory(MemoryKind::Noise, &cfg, 0, None).unwrap();
        let tr = make_memory(MemoryKind::FrozenRandom, &cfg, 0, None).unwrap();
        let mut s = noise.initial_state(0);
        assert!(tr.step(&mut s, &[0.0; 8]).is_err());
    }

    #[test]
    fn zero_steps_leave_weights_unchanged() {
        let mut m = MemoryModel::new(small(1, 8), 0).unwrap();
        let before = m.digest();
        let corpus = Corpus::cyclic(11, 5, 200).unwrap();
        let cfg = PretrainConfig {
            steps: 0,
            seq_len: 8,
            ..PretrainConfig::default()
        };
        pretrain_clm(&mut m, &corpus, &cfg).unwrap();
        assert_eq!(m.digest(), before);
    }

    #[test]
    fn vocabulary_overflow_is_rejected() {
        let mut m = MemoryModel::new(small(1, 8), 0).unwrap();
        let corpus = Corpus {
            vocab: 11,
            tokens: vec![0, 1, 12, 3, 4, 5, 6, 7, 8, 9, 10],
        };
        assert!(pretrain_clm(&mut m, &corpus, &PretrainConfig::default()).is_err());
        assert!(Corpus::new(4, vec![0, 4]).is_err());
    }

    #[test]
    fn pretraining_reduces_loss() {
        let mut m = MemoryModel::new(small(1, 8), 0).unwrap();
        let corpus = Corpus::cyclic(11, 5, 400).unwrap();
        let cfg = PretrainConfig {
            steps: 60,
            batch: 4,
            seq_len: 8,
            ..PretrainConfig::default()
        };
        let r = pretrain_clm(&mut m, &corpus, &cfg).unwrap();
        let head: f64 = r.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = r.losses[55..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }

    #[test]
    fn entropy_rate_of_known_chains() {
        let det = MarkovChain {
            transition: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        };
        assert!(det.entropy_rate().abs() < 1e-12);
        let fair = MarkovChain {
            transition: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        };
        assert!((fair.entropy_rate() - 2f64.ln()).abs() < 1e-12);
        // asymmetric two-state chain: pi = (b, a)/(a+b)
        let (a, b) = (0.2, 0.6);
        let chain = MarkovChain {
            transition: vec![vec![1.0 - a, a], vec![b, 1.0 - b]],
        };
        let h = |p: f64| -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
        let want = (b * h(a) + a * h(b)) / (a + b);
        assert!((chain.entropy_rate() - want).abs() < 1e-12);
    }

    #[test]
    fn synthetic_corpus_is_seeded_and_in_range() {
        let a = Corpus::synthetic(32, 500, 1);
        assert_eq!(a, Corpus::synthetic(32, 500, 1));
        assert_ne!(a, Corpus::synthetic(32, 500, 2));
        assert_eq!(a.tokens.len(), 500);
        assert!(a.tokens.iter().all(|&t| t < 32));
    }
}
