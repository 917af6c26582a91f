//! The `helm` command line: pretraining, training, ablations, analysis,
//! statistics and rollouts, all driven by one flat `key = value` config.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::agent::{Agent, AgentConfig, AgentKind};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::fhopfield::{distance_matrices, distortion_stats, FrozenHopfield};
use crate::memnet::{
    perplexity, pretrain_clm, write_attention_maps, Corpus, MarkovChain, Memory, MemoryKind, MemoryModel,
    MemoryModelConfig, PositionScheme, PretrainConfig,
};
use crate::ndiff::{checkpoint, AdamWConfig};
use crate::ppo::{evaluate_policy, train, PpoConfig, TrainConfig};
use crate::rng::{sub_seed, Rng};
use crate::stats::{pairwise, summarize, PairRow, RunRecord, SummaryRow};

/// Exit status for invalid configuration or usage.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for faults while running.
pub const EXIT_RUNTIME: i32 = 1;

pub const CONFIG_FILE: &str = "config.txt";
pub const CURVE_FILE: &str = "curve.csv";
pub const MEMORY_FILE: &str = "memory.helm";

/// Every ablation variant, in reporting order.
pub const VARIANTS: [&str; 6] = [
    "helm",
    "frozen-random",
    "noise",
    "positional",
    "markov",
    "trained-recurrent",
];

/// Keys whose default depends on the environment.
const PPO_KEYS: [&str; 14] = [
    "lr",
    "rollout",
    "ent_coef",
    "vf_coef",
    "gamma",
    "lambda",
    "clip",
    "epochs",
    "minibatches",
    "max_grad_norm",
    "num_envs",
    "total_steps",
    "weight_decay",
    "normalize_advantages",
];

/// Recognized keys and their defaults. PPO keys default to the
/// per-environment values and are filled in on resolution.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("seeds", "1"),
    ("jobs", "1"),
    ("method", ""),
    ("env", "tmaze"),
    ("corridor", "8"),
    ("key_width", "8"),
    ("key_height", "3"),
    ("agent", "helm"),
    ("memory", "frozen-random"),
    ("memory_checkpoint", ""),
    ("beta", "100"),
    ("hidden", "128"),
    ("action_input", "false"),
    ("vocab", "256"),
    ("dim", "32"),
    ("layers", "2"),
    ("heads", "2"),
    ("ff", "64"),
    ("register_len", "32"),
    ("position", "relative-bias"),
    ("lr", ""),
    ("rollout", ""),
    ("ent_coef", ""),
    ("vf_coef", ""),
    ("gamma", ""),
    ("lambda", ""),
    ("clip", ""),
    ("epochs", ""),
    ("minibatches", ""),
    ("max_grad_norm", ""),
    ("num_envs", ""),
    ("total_steps", ""),
    ("weight_decay", ""),
    ("normalize_advantages", ""),
    ("checkpoint_every", "0"),
    ("corpus", "synthetic"),
    ("corpus_vocab", "0"),
    ("corpus_len", "50000"),
    ("period", "8"),
    ("sparsity", "4"),
    ("holdout", "0.1"),
    ("pretrain_steps", "2000"),
    ("batch", "8"),
    ("seq_len", "32"),
    ("pretrain_lr", "3e-3"),
    (
        "variants",
        "helm,frozen-random,noise,positional,markov,trained-recurrent",
    ),
    ("samples", "64"),
    ("betas", "1,10,100"),
    ("jl_pairs", "10000"),
    ("jl_eps", "0.5"),
    ("policy", ""),
    ("window", "100"),
    ("resamples", "2000"),
    ("episodes", "10"),
];

/// Flat run configuration: defaults, then a config file, then `--set`
/// overrides. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key '{key}'"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{pair}'")))?;
        self.set(k.trim(), v)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i as u64 + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                line: i as u64 + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_args(args: &ConfigArgs) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = &args.config {
            let text =
                fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        for pair in &args.set {
            cfg.set_pair(pair)?;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("invalid value '{raw}' for key '{key}'")))
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    /// Fills the environment-dependent PPO defaults.
    fn resolve(&mut self) -> Result<()> {
        let env = self.env_spec()?;
        let d = PpoConfig::for_env(&env);
        let defaults = [
            d.lr.to_string(),
            d.rollout.to_string(),
            d.ent_coef.to_string(),
            d.vf_coef.to_string(),
            d.gamma.to_string(),
            d.lambda.to_string(),
            d.clip.to_string(),
            d.epochs.to_string(),
            d.minibatches.to_string(),
            d.max_grad_norm.to_string(),
            d.num_envs.to_string(),
            d.total_steps.to_string(),
            d.weight_decay.to_string(),
            d.normalize_advantages.to_string(),
        ];
        for (k, v) in PPO_KEYS.iter().zip(defaults) {
            if self.raw(k).is_empty() {
                self.set(k, &v)?;
            }
        }
        Ok(())
    }

    /// The resolved configuration as `key = value` lines, sorted by key.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.to_text())?;
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        EnvSpec::parse(
            self.raw("env"),
            self.get("corridor")?,
            self.get("key_width")?,
            self.get("key_height")?,
        )
    }

    pub fn memory_model(&self) -> Result<MemoryModelConfig> {
        let cfg = MemoryModelConfig {
            vocab: self.get("vocab")?,
            dim: self.get("dim")?,
            layers: self.get("layers")?,
            heads: self.get("heads")?,
            ff: self.get("ff")?,
            register_len: self.get("register_len")?,
            position: self.raw("position").parse::<PositionScheme>()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn agent(&self) -> Result<AgentConfig> {
        let beta: f64 = self.get("beta")?;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        Ok(AgentConfig {
            kind: self.raw("agent").parse()?,
            memory: self.raw("memory").parse()?,
            memory_model: self.memory_model()?,
            beta,
            hidden: self.get("hidden")?,
            action_input: self.get("action_input")?,
        })
    }

    pub fn ppo(&self) -> Result<PpoConfig> {
        let cfg = PpoConfig {
            lr: self.get("lr")?,
            rollout: self.get("rollout")?,
            ent_coef: self.get("ent_coef")?,
            vf_coef: self.get("vf_coef")?,
            gamma: self.get("gamma")?,
            lambda: self.get("lambda")?,
            clip: self.get("clip")?,
            epochs: self.get("epochs")?,
            minibatches: self.get("minibatches")?,
            max_grad_norm: self.get("max_grad_norm")?,
            num_envs: self.get("num_envs")?,
            total_steps: self.get("total_steps")?,
            weight_decay: self.get("weight_decay")?,
            normalize_advantages: self.get("normalize_advantages")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        let lr: f64 = self.get("pretrain_lr")?;
        if !(lr > 0.0) {
            return Err(Error::Config("pretrain_lr must be positive".into()));
        }
        let cfg = PretrainConfig {
            steps: self.get("pretrain_steps")?,
            batch: self.get("batch")?,
            seq_len: self.get("seq_len")?,
            optimizer: AdamWConfig {
                lr,
                ..AdamWConfig::default()
            },
            seed: sub_seed(self.get("seed")?, "pretrain"),
            ..PretrainConfig::default()
        };
        if cfg.batch == 0 || cfg.seq_len == 0 {
            return Err(Error::Config("batch and seq_len must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        let base: u64 = self.get("seed")?;
        let n: u64 = self.get("seeds")?;
        if n == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        Ok((base..base + n).collect())
    }

    pub fn jobs(&self) -> Result<usize> {
        let jobs: usize = self.get("jobs")?;
        if jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(jobs)
    }

    /// Run label: the `method` key, otherwise the ablation variant name
    /// matching the agent and memory kinds.
    pub fn method(&self) -> Result<String> {
        if !self.raw("method").is_empty() {
            return Ok(self.raw("method").to_string());
        }
        let agent = self.agent()?;
        Ok(match agent.kind {
            AgentKind::Helm if agent.memory == MemoryKind::Pretrained => "helm".to_string(),
            AgentKind::Helm => agent.memory.to_string(),
            other => other.to_string(),
        })
    }

    /// Selected ablation variants; unknown names are a config error.
    pub fn variants(&self) -> Result<Vec<String>> {
        let list = self.list("variants");
        if list.is_empty() {
            return Err(Error::Config("no ablation variants selected".into()));
        }
        for v in &list {
            if !VARIANTS.contains(&v.as_str()) {
                return Err(Error::Config(format!(
                    "unknown ablation variant '{v}' (expected one of {})",
                    VARIANTS.join(", ")
                )));
            }
        }
        Ok(list)
    }

    pub fn betas(&self) -> Result<Vec<f64>> {
        let list = self.list("betas");
        if list.is_empty() {
            return Err(Error::Config("no betas given".into()));
        }
        list.iter()
            .map(|b| match b.parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
                _ => Err(Error::Config(format!("invalid beta '{b}'"))),
            })
            .collect()
    }

    /// Checks every key a subcommand may read, so bad values fail before
    /// any work starts.
    pub fn validate(&self) -> Result<()> {
        self.env_spec()?;
        self.agent()?;
        self.ppo()?;
        self.pretrain()?;
        self.seeds()?;
        self.jobs()?;
        self.variants()?;
        self.betas()?;
        self.corpus_vocab()?;
        for key in [
            "corpus_len",
            "period",
            "sparsity",
            "samples",
            "jl_pairs",
            "window",
            "resamples",
            "episodes",
        ] {
            self.get::<usize>(key)?;
        }
        self.get::<usize>("checkpoint_every")?;
        let holdout: f64 = self.get("holdout")?;
        if !(holdout > 0.0 && holdout < 1.0) {
            return Err(Error::Config(format!("holdout must lie in (0, 1), got {holdout}")));
        }
        let eps: f64 = self.get("jl_eps")?;
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::Config(format!("jl_eps must lie in (0, 1), got {eps}")));
        }
        if !["synthetic", "cyclic", "markov"].contains(&self.raw("corpus")) {
            return Err(Error::Config(format!(
                "unknown corpus '{}' (expected synthetic, cyclic or markov)",
                self.raw("corpus")
            )));
        }
        Ok(())
    }

    fn corpus_vocab(&self) -> Result<usize> {
        let vocab: usize = self.get("vocab")?;
        let cv: usize = self.get("corpus_vocab")?;
        let cv = if cv == 0 { vocab } else { cv };
        if cv > vocab {
            return Err(Error::Config(format!(
                "corpus_vocab {cv} exceeds the model vocabulary {vocab}"
            )));
        }
        Ok(cv)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let vocab = self.corpus_vocab()?;
        let len: usize = self.get("corpus_len")?;
        let seed = sub_seed(self.get("seed")?, "corpus");
        match self.raw("corpus") {
            "cyclic" => Corpus::cyclic(vocab, self.get("period")?, len),
            "markov" => {
                let chain = MarkovChain::random(vocab, self.get("sparsity")?, seed);
                Ok(Corpus::markov(&chain, len, sub_seed(seed, "sample")))
            }
            "synthetic" => Ok(Corpus::synthetic(vocab, len, seed)),
            other => Err(Error::Config(format!("unknown corpus '{other}'"))),
        }
    }
}

// ---- command line ----

#[derive(Parser, Debug)]
#[command(
    name = "helm",
    version,
    about = "Frozen-memory agents for partially observable gridworlds"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct SeedArgs {
    /// Number of consecutive seeds starting at `seed`.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Seeds run in parallel.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain the memory transformer with causal language modeling.
    Pretrain(ConfigArgs),
    /// Train agents with PPO, one curve file per seed.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Train every selected memory variant over shared seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Distance matrices, token annotations, attention maps and a JL report.
    Analyze(ConfigArgs),
    /// Summarize learning curves: IQM, bootstrap interval, pairwise tests.
    Stats {
        #[command(flatten)]
        config: ConfigArgs,
        /// Curve files, optionally labelled `method=path` or
        /// `method:env=path`.
        #[arg(required = true)]
        inputs: Vec<String>,
    },
    /// Play episodes with a trained or freshly initialized agent.
    Rollout {
        #[command(flatten)]
        config: ConfigArgs,
        /// Agent checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Print the world after every step.
        #[arg(long)]
        render: bool,
        /// Pick the most likely action instead of sampling.
        #[arg(long)]
        greedy: bool,
    },
}

fn out_dir(args: &ConfigArgs, default: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
}

fn with_seed_args(args: &ConfigArgs, seeds: &SeedArgs) -> ConfigArgs {
    let mut args = args.clone();
    if let Some(n) = seeds.seeds {
        args.set.push(format!("seeds={n}"));
    }
    if let Some(j) = seeds.jobs {
        args.set.push(format!("jobs={j}"));
    }
    args
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let cfg = RunConfig::from_args(args)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = load_config(&args)?;
            cmd_pretrain(&cfg, &out_dir(&args, "pretrain")).map(|_| ())
        }
        Command::Train { config, seeds } => {
            let args = with_seed_args(&config, &seeds);
            let cfg = load_config(&args)?;
            cmd_train(&cfg, &out_dir(&args, "train")).map(|_| ())
        }
        Command::Ablate { config, seeds } => {
            let args = with_seed_args(&config, &seeds);
            let cfg = load_config(&args)?;
            cmd_ablate(&cfg, &out_dir(&args, "ablate")).map(|_| ())
        }
        Command::Analyze(args) => {
            let cfg = load_config(&args)?;
            cmd_analyze(&cfg, &out_dir(&args, "analyze"))
        }
        Command::Stats { config, inputs } => {
            let cfg = load_config(&config)?;
            let (summary, pairs) = cmd_stats(&cfg, &inputs, config.out.as_deref())?;
            print!("{}", summary_text(&summary));
            if !pairs.is_empty() {
                print!("{}", pairwise_text(&pairs));
            }
            Ok(())
        }
        Command::Rollout {
            config,
            checkpoint,
            render,
            greedy,
        } => {
            let cfg = load_config(&config)?;
            let stdout = std::io::stdout();
            cmd_rollout(&cfg, checkpoint.as_deref(), render, greedy, &mut stdout.lock()).map(|_| ())
        }
    }
}

// ---- subcommands ----

/// Trains the memory model on the configured corpus and writes the
/// checkpoint, a per-step loss log and the held-out perplexity.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<f64> {
    let model_cfg = cfg.memory_model()?;
    let pcfg = cfg.pretrain()?;
    let corpus = cfg.corpus()?;
    let holdout: f64 = cfg.get("holdout")?;
    cfg.write_to_dir(out)?;
    let (train_part, held) = corpus.split(holdout);
    let mut model = MemoryModel::new(model_cfg, sub_seed(cfg.get("seed")?, "memory"))?;
    let report = pretrain_clm(&mut model, &train_part, &pcfg)?;
    let ppl = perplexity(&model, &held, pcfg.seq_len)?;
    let mut log = BufWriter::new(File::create(out.join("pretrain_log.csv"))?);
    writeln!(log, "step,loss")?;
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(log, "{},{:?}", i + 1, l)?;
    }
    log.flush()?;
    fs::write(
        out.join("perplexity.csv"),
        format!("split,perplexity\nheldout,{ppl:?}\n"),
    )?;
    checkpoint::save(&out.join(MEMORY_FILE), model.params())?;
    println!("held-out perplexity {ppl:.4}");
    Ok(ppl)
}

/// Loads the pretrained memory named by `memory_checkpoint`, or pretrains
/// one into `out` when none is given.
fn pretrained_memory(cfg: &RunConfig, out: &Path) -> Result<MemoryModel> {
    let model_cfg = cfg.memory_model()?;
    let path = cfg.raw("memory_checkpoint");
    if path.is_empty() {
        let dir = out.join("pretrain");
        cmd_pretrain(cfg, &dir)?;
        let params = checkpoint::load(&dir.join(MEMORY_FILE))?;
        return MemoryModel::from_params(model_cfg, params);
    }
    let params = checkpoint::load(Path::new(path))?;
    MemoryModel::from_params(model_cfg, params)
}

fn needs_pretrained(cfg: &RunConfig) -> Result<bool> {
    let agent = cfg.agent()?;
    Ok(agent.kind == AgentKind::Helm && agent.memory == MemoryKind::Pretrained)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

fn train_config(cfg: &RunConfig, seed: u64, method: &str) -> Result<TrainConfig> {
    Ok(TrainConfig {
        env: cfg.env_spec()?,
        agent: cfg.agent()?,
        ppo: cfg.ppo()?,
        seed,
        method: method.to_string(),
        checkpoint_every: cfg.get("checkpoint_every")?,
    })
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Trains one agent per seed into `out/seed_<s>/`, each directory holding
/// its curve, checkpoints and resolved config.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Vec<RunRecord>> {
    let method = cfg.method()?;
    let seeds = cfg.seeds()?;
    cfg.write_to_dir(out)?;
    let pretrained = if needs_pretrained(cfg)? {
        Some(pretrained_memory(cfg, out)?)
    } else {
        None
    };
    let jobs = cfg.jobs()?;
    let run_one = |&seed: &u64| -> Result<RunRecord> {
        let dir = seed_dir(out, seed);
        let mut own = cfg.clone();
        own.set("seed", &seed.to_string())?;
        own.set("seeds", "1")?;
        own.set("method", &method)?;
        own.write_to_dir(&dir)?;
        let tc = train_config(&own, seed, &method)?;
        Ok(train(&tc, pretrained.as_ref(), Some(&dir))?.record)
    };
    if jobs == 1 {
        seeds.iter().map(run_one).collect()
    } else {
        pool(jobs)?.install(|| seeds.par_iter().map(run_one).collect())
    }
}

/// Overrides that turn a base config into one ablation variant.
pub fn variant_overrides(variant: &str) -> Result<Vec<(&'static str, &'static str)>> {
    Ok(match variant {
        "helm" => vec![("agent", "helm"), ("memory", "pretrained")],
        "frozen-random" => vec![("agent", "helm"), ("memory", "frozen-random")],
        "noise" => vec![("agent", "helm"), ("memory", "noise")],
        "positional" => vec![("agent", "helm"), ("memory", "positional")],
        "markov" => vec![("agent", "markov")],
        "trained-recurrent" => vec![("agent", "trained-recurrent")],
        other => {
            return Err(Error::Config(format!(
                "unknown ablation variant '{other}' (expected one of {})",
                VARIANTS.join(", ")
            )))
        }
    })
}

/// Runs every selected variant over the same seeds into `out/<variant>/`
/// and writes the combined summary and pairwise tests.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<(Vec<SummaryRow>, Vec<PairRow>)> {
    let variants = cfg.variants()?;
    let seeds = cfg.seeds()?;
    cfg.write_to_dir(out)?;
    let mut configs = Vec::new();
    for v in &variants {
        let mut vc = cfg.clone();
        for (k, val) in variant_overrides(v)? {
            vc.set(k, val)?;
        }
        vc.set("method", v)?;
        configs.push((v.clone(), vc));
    }
    let pretrained = if variants.iter().any(|v| v == "helm") {
        Some(pretrained_memory(cfg, out)?)
    } else {
        None
    };
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let run_one = |&(i, seed): &(usize, u64)| -> Result<RunRecord> {
        let (name, vc) = &configs[i];
        let dir = seed_dir(&out.join(name), seed);
        let mut own = vc.clone();
        own.set("seed", &seed.to_string())?;
        own.set("seeds", "1")?;
        own.write_to_dir(&dir)?;
        let tc = train_config(&own, seed, name)?;
        let memory = if name == "helm" { pretrained.as_ref() } else { None };
        Ok(train(&tc, memory, Some(&dir))?.record)
    };
    let threads = cfg.jobs()?;
    let runs: Vec<RunRecord> = if threads == 1 {
        jobs.iter().map(run_one).collect::<Result<_>>()?
    } else {
        pool(threads)?.install(|| jobs.par_iter().map(run_one).collect::<Result<_>>())?
    };
    let window: usize = cfg.get("window")?;
    let summary = summarize(&runs, window, cfg.get("resamples")?, cfg.get("seed")?)?;
    let pairs = pairwise(&runs, window)?;
    fs::write(out.join("summary.csv"), summary_text(&summary))?;
    fs::write(out.join("pairwise.csv"), pairwise_text(&pairs))?;
    print!("{}", summary_text(&summary));
    Ok((summary, pairs))
}

pub fn summary_text(rows: &[SummaryRow]) -> String {
    let mut s = String::from("method,env,iqm,ci_lo,ci_hi,n_seeds\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:?},{:?},{:?},{}\n",
            r.method, r.env, r.iqm, r.ci_lo, r.ci_hi, r.n_seeds
        ));
    }
    s
}

pub fn pairwise_text(rows: &[PairRow]) -> String {
    let mut s = String::from("method_a,method_b,p_value,env\n");
    for r in rows {
        s.push_str(&format!("{},{},{:?},{}\n", r.method_a, r.method_b, r.p_value, r.env));
    }
    s
}

/// Method and environment for a curve file: an explicit `method[:env]=`
/// label, else the resolved config stored beside it, else the name of the
/// enclosing directory.
fn label_input(input: &str) -> (Option<(String, Option<String>)>, PathBuf) {
    if let Some((label, path)) = input.split_once('=') {
        let (method, env) = match label.split_once(':') {
            Some((m, e)) => (m.to_string(), Some(e.to_string())),
            None => (label.to_string(), None),
        };
        return (Some((method, env)), PathBuf::from(path));
    }
    (None, PathBuf::from(input))
}

fn stored_labels(path: &Path) -> Option<(String, String)> {
    let text = fs::read_to_string(path.parent()?.join(CONFIG_FILE)).ok()?;
    let mut stored = RunConfig::default();
    stored.apply_text(&text).ok()?;
    stored.resolve().ok()?;
    Some((stored.method().ok()?, stored.raw("env").to_string()))
}

/// Reads curve files and writes `summary.csv` and `pairwise.csv` to `out`
/// when given.
pub fn cmd_stats(cfg: &RunConfig, inputs: &[String], out: Option<&Path>) -> Result<(Vec<SummaryRow>, Vec<PairRow>)> {
    let mut runs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let (label, path) = label_input(input);
        let stored = stored_labels(&path);
        let fallback = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string());
        let (method, env) = match (label, stored) {
            (Some((m, Some(e))), _) => (m, e),
            (Some((m, None)), s) => (m, s.map_or_else(|| "-".to_string(), |s| s.1)),
            (None, Some(s)) => s,
            (None, None) => (fallback, "-".to_string()),
        };
        let file = File::open(&path).map_err(|e| Error::Invalid(format!("cannot open {}: {e}", path.display())))?;
        let run = RunRecord::read_csv(file, &method, &env).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse {
                line,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })?;
        runs.push(run);
    }
    let window: usize = cfg.get("window")?;
    let summary = summarize(&runs, window, cfg.get("resamples")?, cfg.get("seed")?)?;
    let pairs = pairwise(&runs, window)?;
    if let Some(dir) = out {
        cfg.write_to_dir(dir)?;
        fs::write(dir.join("summary.csv"), summary_text(&summary))?;
        fs::write(dir.join("pairwise.csv"), pairwise_text(&pairs))?;
    }
    Ok((summary, pairs))
}

/// Builds the configured agent, restoring `checkpoint` when given.
fn load_agent(cfg: &RunConfig, checkpoint_path: Option<&Path>, out: &Path) -> Result<(Agent, EnvSpec)> {
    let env = cfg.env_spec()?;
    let probe = env.build();
    let agent_cfg = cfg.agent()?;
    let agent = match checkpoint_path {
        Some(p) => {
            let params = checkpoint::load(p)?;
            Agent::from_checkpoint(agent_cfg, probe.obs_shape(), probe.num_actions(), &params)?
        }
        None => {
            let pretrained = if needs_pretrained(cfg)? {
                Some(pretrained_memory(cfg, out)?)
            } else {
                None
            };
            Agent::new(
                agent_cfg,
                probe.obs_shape(),
                probe.num_actions(),
                sub_seed(cfg.get("seed")?, "agent"),
                pretrained.as_ref(),
            )?
        }
    };
    Ok((agent, env))
}

/// Plays `episodes` episodes and returns their returns; with `render`
/// every intermediate world state is written to `w`.
pub fn cmd_rollout(
    cfg: &RunConfig,
    checkpoint_path: Option<&Path>,
    render: bool,
    greedy: bool,
    w: &mut dyn Write,
) -> Result<Vec<f64>> {
    let (agent, env_spec) = load_agent(cfg, checkpoint_path, Path::new("runs").join("rollout").as_path())?;
    let episodes: usize = cfg.get("episodes")?;
    let seed: u64 = cfg.get("seed")?;
    if !render {
        let returns = evaluate_policy(&agent, &env_spec, episodes, seed, greedy)?;
        for (i, r) in returns.iter().enumerate() {
            writeln!(w, "episode {i} return {r}")?;
        }
        return Ok(returns);
    }
    let mut env = env_spec.build();
    let mut seeds = Rng::for_component(seed, "eval.env");
    let mut rng = Rng::for_component(seed, "eval.policy");
    let mut returns = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let episode_seed = seeds.next_u64();
        let mut obs = env.reset(episode_seed);
        let mut state = agent.initial_state(episode_seed);
        let mut total = 0.0;
        writeln!(w, "episode {i}\n{}", env.render())?;
        loop {
            let out = agent.act(&obs, &mut state, &mut rng, greedy)?;
            let step = env.step(out.action)?;
            total += step.reward;
            writeln!(w, "action {} reward {}\n{}", out.action, step.reward, env.render())?;
            if step.done {
                break;
            }
            obs = step.observation;
        }
        writeln!(w, "episode {i} return {total}")?;
        returns.push(total);
    }
    Ok(returns)
}

fn write_matrix(path: &Path, m: &[Vec<f64>]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

fn beta_label(beta: f64) -> String {
    format!("{beta}").replace('.', "p")
}

/// Samples observations with a random policy (or the policy in the
/// `policy` checkpoint) and writes the representation analyses.
pub fn cmd_analyze(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.agent()?.kind != AgentKind::Helm {
        return Err(Error::Config("analyze needs agent = helm".into()));
    }
    let samples: usize = cfg.get("samples")?;
    if samples < 2 {
        return Err(Error::Config("analyze needs samples >= 2".into()));
    }
    let betas = cfg.betas()?;
    cfg.write_to_dir(out)?;
    let policy = cfg.raw("policy");
    let (agent, env_spec) = load_agent(cfg, (!policy.is_empty()).then(|| Path::new(policy)), out)?;
    let fh: &FrozenHopfield = agent.frozen_hopfield().expect("helm agent");
    let seed: u64 = cfg.get("seed")?;

    // observation sequence of consecutive episodes
    let mut env = env_spec.build();
    let mut seeds = Rng::for_component(seed, "analyze.env");
    let mut rng = Rng::for_component(seed, "analyze.policy");
    let mut observations = Vec::with_capacity(samples);
    let episode_seed = seeds.next_u64();
    let mut obs = env.reset(episode_seed);
    let mut state = agent.initial_state(episode_seed);
    let mut prev_action: Option<usize> = None;
    while observations.len() < samples {
        let mut o = obs.flatten();
        if agent.config().action_input {
            let mut onehot = vec![0.0; agent.num_actions()];
            if let Some(a) = prev_action {
                onehot[a] = 1.0;
            }
            o.extend(onehot);
        }
        observations.push(o);
        let action = if policy.is_empty() {
            rng.below(env.num_actions())
        } else {
            agent.act(&obs, &mut state, &mut rng, false)?.action
        };
        let step = env.step(action)?;
        prev_action = Some(action);
        if step.done {
            let s = seeds.next_u64();
            obs = env.reset(s);
            state = agent.initial_state(s);
            prev_action = None;
        } else {
            obs = step.observation;
        }
    }

    let dm = distance_matrices(&observations, fh, &betas)?;
    write_matrix(&out.join("distances_obs.csv"), &dm.observation)?;
    for (beta, m) in &dm.embedded {
        write_matrix(&out.join(format!("distances_beta{}.csv", beta_label(*beta))), m)?;
    }

    let mut tokens = BufWriter::new(File::create(out.join("tokens.csv"))?);
    writeln!(tokens, "index,beta,token,weight")?;
    for &beta in &betas {
        let f = fh.with_beta(beta)?;
        for (i, o) in observations.iter().enumerate() {
            let w = f.token_weights(o)?;
            let t = f.nearest_token(o)?;
            writeln!(tokens, "{i},{beta},{t},{:?}", w[t])?;
        }
    }
    tokens.flush()?;

    if let Some(Memory::Transformer { model, .. }) = agent.memory() {
        let t = samples.min(model.config().register_len);
        let xs = observations[..t]
            .iter()
            .map(|o| fh.embed(o))
            .collect::<Result<Vec<_>>>()?;
        write_attention_maps(&out.join("attention"), &model.attention_maps(&xs)?)?;
    }

    let jl_pairs: usize = cfg.get("jl_pairs")?;
    let mut pair_rng = Rng::for_component(seed, "analyze.pairs");
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..jl_pairs)
        .map(|_| {
            let a = pair_rng.below(observations.len());
            let b = pair_rng.below(observations.len());
            (observations[a].clone(), observations[b].clone())
        })
        .collect();
    let mut report = BufWriter::new(File::create(out.join("jl_report.csv"))?);
    writeln!(report, "key,value")?;
    match distortion_stats(fh.projection(), &pairs, cfg.get("jl_eps")?) {
        Ok(r) => {
            writeln!(report, "eps,{:?}", r.eps)?;
            writeln!(report, "embed_dim,{}", r.embed_dim)?;
            writeln!(report, "obs_dim,{}", fh.obs_dim())?;
            writeln!(report, "delta,{:?}", r.delta)?;
            writeln!(report, "pairs,{}", r.pairs)?;
            writeln!(report, "violations,{}", r.violations)?;
            writeln!(report, "violation_fraction,{:?}", r.violation_fraction)?;
            writeln!(report, "mean_ratio,{:?}", r.mean_ratio)?;
            writeln!(report, "min_ratio,{:?}", r.min_ratio)?;
            writeln!(report, "max_ratio,{:?}", r.max_ratio)?;
        }
        // every sampled observation identical: nothing to measure
        Err(Error::Invalid(_)) => {
            writeln!(report, "eps,{:?}", cfg.get::<f64>("jl_eps")?)?;
            writeln!(
                report,
                "delta,{:?}",
                crate::fhopfield::jl_failure_prob(fh.embed_dim(), cfg.get("jl_eps")?)?
            )?;
            writeln!(report, "pairs,0")?;
            writeln!(report, "violation_fraction,0.0")?;
        }
        Err(e) => return Err(e),
    }
    report.flush()?;
    println!("analysis written to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_validate() {
        let cfg = RunConfig::from_args(&ConfigArgs::default()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.raw("rollout"), "64");
        assert_eq!(cfg.method().unwrap(), "frozen-random");
    }

    #[test]
    fn env_dependent_ppo_defaults() {
        let args = ConfigArgs {
            set: vec!["env=key-corridor".into()],
            ..Default::default()
        };
        let cfg = RunConfig::from_args(&args).unwrap();
        assert_eq!(cfg.ppo().unwrap(), PpoConfig::for_env(&cfg.env_spec().unwrap()));
        let args = ConfigArgs {
            set: vec!["env=key-corridor".into(), "rollout=7".into()],
            ..Default::default()
        };
        assert_eq!(RunConfig::from_args(&args).unwrap().ppo().unwrap().rollout, 7);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set_pair("nope=1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set_pair("seed"), Err(Error::Config(_))));
        let err = cfg.apply_text("seed = 1\n\nbogus = 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::from_args(&ConfigArgs {
            set: vec!["beta=10".into(), "seeds=3".into()],
            ..Default::default()
        })
        .unwrap();
        let text = cfg.to_text();
        let mut back = RunConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.apply_text("# comment only\nbeta = 5 # trailing\n").unwrap();
        assert_eq!(cfg.get::<f64>("beta").unwrap(), 5.0);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for pair in [
            "vocab=0",
            "beta=-1",
            "env=atari",
            "variants=helm,gtrxl",
            "dim=31",
            "seeds=0",
            "holdout=1",
        ] {
            let args = ConfigArgs {
                set: vec![pair.into()],
                ..Default::default()
            };
            let err = RunConfig::from_args(&args).and_then(|c| c.validate()).unwrap_err();
            assert_eq!(exit_code(&err), EXIT_CONFIG, "{pair}: {err}");
        }
    }

    #[test]
    fn variants_differ_only_in_their_overrides() {
        let base = RunConfig::default();
        let mut noise = base.clone();
        let mut markov = base.clone();
        for (k, v) in variant_overrides("noise").unwrap() {
            noise.set(k, v).unwrap();
        }
        for (k, v) in variant_overrides("markov").unwrap() {
            markov.set(k, v).unwrap();
        }
        let diff: Vec<&String> = noise
            .values
            .keys()
            .filter(|k| noise.values[*k] != markov.values[*k])
            .collect();
        assert_eq!(diff, ["agent", "memory"]);
        assert!(variant_overrides("gtrxl").is_err());
    }

    #[test]
    fn seed_list() {
        let args = ConfigArgs {
            set: vec!["seed=5".into(), "seeds=3".into()],
            ..Default::default()
        };
        assert_eq!(RunConfig::from_args(&args).unwrap().seeds().unwrap(), vec![5, 6, 7]);
    }

    #[test]
    fn labels_from_inputs() {
        let (l, p) = label_input("helm:tmaze=a/b.csv");
        assert_eq!(l, Some(("helm".to_string(), Some("tmaze".to_string()))));
        assert_eq!(p, PathBuf::from("a/b.csv"));
        assert_eq!(label_input("x.csv").0, None);
    }
}
