use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use abr_core::checkpoint::{load_offline, load_tuned, save_offline, save_tuned, CheckpointMeta};
use abr_core::correlation::{correlation_table, write_correlation_csv};
use abr_core::ea3c::{evaluate_agent, sample_action, train_offline, ActionMode, AgentPair, AgentSpec, TrainConfig, TrainingLog};
use abr_core::env::{write_episode_csv, EnvConfig, EpisodeConfig, EpisodeReport, QoeWeights, Simulator};
use abr_core::features::Normalization;
use abr_core::mpc::{mpc_rollout, mpc_select, predict, MpcConfig};
use abr_core::online::{evaluate_online, tune_online, OnlineAgent};
use abr_core::trace::{load_traces, save_traces_with_header, split_datasets, SplitPlan, Trace};
use abr_core::AbrError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::plan::{section, LoadedPlan, PolicySource, SweepSection};
use crate::{Cli, CliError, Command, GlobalArgs, VERSION};

pub const TRACES_FILE: &str = "traces.csv";
pub const CORRELATION_FILE: &str = "correlation.csv";
pub const OFFLINE_CHECKPOINT: &str = "offline.ckpt";
pub const TRAINING_LOG: &str = "training_log.csv";
pub const TUNED_CHECKPOINT: &str = "tuned.ckpt";
pub const ONLINE_LOG: &str = "online_log.csv";
pub const EVAL_PER_TRACE: &str = "eval_per_trace.csv";
pub const EVAL_SUMMARY: &str = "eval_summary.csv";
pub const EVAL_CHUNKS: &str = "eval_chunks.csv";
pub const INFERENCE_TIME: &str = "inference_time.csv";
pub const HEATMAP: &str = "heatmap.csv";
pub const K_SWEEP: &str = "k_sweep.csv";
pub const WEIGHT_SWEEP: &str = "weight_sweep.csv";

/// Resolved plan plus command-line overrides.
pub struct Context {
    pub plan: LoadedPlan,
    pub args: GlobalArgs,
    pub seed: u64,
    pub out: PathBuf,
}

impl Context {
    pub fn new(plan: LoadedPlan, args: GlobalArgs) -> Self {
        let seed = args.seed.unwrap_or(plan.plan.seed);
        let out = match (&args.out, &plan.plan.out) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => plan.resolve(o),
            (None, None) => plan.dir.join("out"),
        };
        Self { plan, args, seed, out }
    }

    pub fn provenance(&self) -> String {
        let mut s = format!("abrlab {VERSION} plan_sha256={} seed={}", self.plan.sha256, self.seed);
        let o = self.args.overrides();
        if !o.is_empty() {
            s.push_str(" overrides=");
            s.push_str(&o.join(","));
        }
        s
    }

    pub fn workers(&self) -> usize {
        self.args.workers.unwrap_or(self.plan.plan.workers).max(1)
    }

    pub fn k(&self) -> usize {
        self.args.k.unwrap_or(self.plan.plan.env.history_len)
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            history_len: self.k(),
            ..self.plan.plan.env.clone()
        }
    }

    pub fn agent_spec(&self) -> AgentSpec {
        let mut spec = self.plan.plan.agent.clone();
        spec.history_len = self.k();
        if let Some(inputs) = &self.args.lower_layers {
            spec.inputs = inputs.clone();
        }
        spec
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.seed = self.seed;
        if let Some(m) = self.args.mode {
            cfg.mode = m;
        }
        cfg
    }

    pub fn load(&self, p: &Path, min_len: usize) -> Result<Vec<Trace>, CliError> {
        Ok(load_traces(&self.plan.resolve(p), min_len)?)
    }

    fn output(&self, name: &str) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.out).map_err(|e| AbrError::io(&self.out, e))?;
        Ok(self.out.join(name))
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            seed: self.seed,
            provenance: self.provenance(),
        }
    }

    /// Writes CSV bytes behind the provenance line.
    fn write_csv(&self, name: &str, body: Vec<u8>) -> Result<PathBuf, CliError> {
        let path = self.output(name)?;
        let mut bytes = format!("# {}\n", self.provenance()).into_bytes();
        bytes.extend(body);
        fs::write(&path, bytes).map_err(|e| AbrError::io(&path, e))?;
        Ok(path)
    }
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>, CliError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), csv::Error>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(AbrError::from)?;
    fill(&mut w).map_err(AbrError::from)?;
    w.into_inner()
        .map_err(|e| CliError::Core(AbrError::Validation(format!("csv buffer: {e}"))))
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let plan_path = cli
        .args
        .plan
        .as_ref()
        .ok_or_else(|| CliError::Config("--plan is required".into()))?;
    let plan = LoadedPlan::load(plan_path)?;
    let ctx = Context::new(plan, cli.args.clone());
    run_command(&ctx, cli.command)
}

pub fn run_command(ctx: &Context, command: Command) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.workers())
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::GenTraces => gen_traces(ctx),
        Command::Analyze => analyze(ctx),
        Command::Split => split(ctx),
        Command::TrainOffline => train(ctx).map(|_| ()),
        Command::TuneOnline => tune(ctx),
        Command::Eval => eval(ctx),
        Command::Sweep => sweep(ctx),
    })
}

fn gen_traces(ctx: &Context) -> Result<(), CliError> {
    let gen = section(&ctx.plan.plan.gen, "gen")?;
    let mut chain = gen.chain.build()?;
    chain.seed = ctx.seed;
    let traces = chain.synthesize_many(gen.count, gen.length)?;
    let path = ctx.output(TRACES_FILE)?;
    save_traces_with_header(&traces, &path, Some(&ctx.provenance()))?;
    Ok(())
}

fn analyze(ctx: &Context) -> Result<(), CliError> {
    let a = section(&ctx.plan.plan.analyze, "analyze")?;
    let traces = ctx.load(&a.traces, 1)?;
    let rows = correlation_table(&traces, a.tau_max)?;
    let mut body = Vec::new();
    write_correlation_csv(&rows, &mut body)?;
    ctx.write_csv(CORRELATION_FILE, body)?;
    Ok(())
}

fn split(ctx: &Context) -> Result<(), CliError> {
    let s = section(&ctx.plan.plan.split, "split")?;
    if s.inputs.is_empty() {
        return Err(CliError::Config("[split] needs at least one input".into()));
    }
    let datasets = s
        .inputs
        .iter()
        .map(|p| ctx.load(p, ctx.k()))
        .collect::<Result<Vec<_>, _>>()?;
    let parts = split_datasets(&datasets, &s.fractions.unwrap_or_else(SplitPlan::default), ctx.seed)?;
    for (name, traces) in parts.named_sets() {
        let path = ctx.output(&format!("{name}.csv"))?;
        save_traces_with_header(traces, &path, Some(&ctx.provenance()))?;
    }
    Ok(())
}

/// Trains one pair on the `[train]` data with the given environment and spec.
pub fn train_pair(
    ctx: &Context,
    env: &EnvConfig,
    spec: &AgentSpec,
) -> Result<(AgentPair, TrainingLog, u128), CliError> {
    let t = section(&ctx.plan.plan.train, "train")?;
    let sim = Simulator::new(env.clone())?;
    let train = ctx.load(&t.train, env.history_len)?;
    let val = ctx.load(&t.val, env.history_len)?;
    let norm = Normalization::from_training(&train, sim.ladder(), env.buffer_cap_s);
    let agent = AgentPair::init(spec, norm, ctx.seed)?;
    let started = Instant::now();
    let (best, log) = train_offline(agent, &sim, &train, &val, &ctx.train_config(&t.config))?;
    Ok((best, log, started.elapsed().as_millis()))
}

fn train(ctx: &Context) -> Result<AgentPair, CliError> {
    let (best, log, _) = train_pair(ctx, &ctx.env(), &ctx.agent_spec())?;
    save_offline(&ctx.output(OFFLINE_CHECKPOINT)?, &best, &ctx.meta())?;
    let mut body = Vec::new();
    log.write_csv(&mut body)?;
    ctx.write_csv(TRAINING_LOG, body)?;
    Ok(best)
}

fn tune(ctx: &Context) -> Result<(), CliError> {
    let o = section(&ctx.plan.plan.online, "online")?;
    let base_path = ctx.plan.resolve(&o.base);
    let (base, _) = load_offline(&base_path)?;
    let sim = Simulator::new(ctx.env())?;
    let user = ctx.load(&o.user, sim.config().history_len)?;
    let mut cfg = o.config.clone();
    cfg.seed = ctx.seed;
    if let Some(v) = ctx.args.variant {
        cfg.progressive.variant = v;
    }
    let (agent, log) = tune_online(base, &sim, &user, &cfg)?;
    save_tuned(&ctx.output(TUNED_CHECKPOINT)?, &agent, &base_path, &ctx.meta())?;
    let mut body = Vec::new();
    log.write_csv(&mut body)?;
    ctx.write_csv(ONLINE_LOG, body)?;
    Ok(())
}

enum Policy {
    Offline(AgentPair),
    Tuned(OnlineAgent),
    Mpc(MpcConfig),
}

impl Policy {
    fn label(&self) -> String {
        match self {
            Policy::Offline(a) => format!("ea3c[{}]", a.inputs),
            Policy::Tuned(a) => format!("{}[{}]", a.variant, a.base.inputs),
            Policy::Mpc(c) => format!("mpc[h={}]", c.horizon),
        }
    }

    fn evaluate(&self, sim: &Simulator, traces: &[Trace], mode: ActionMode, seed: u64) -> Result<Vec<EpisodeReport>, AbrError> {
        match self {
            Policy::Offline(a) => evaluate_agent(a, sim, traces, mode, seed),
            Policy::Tuned(a) => evaluate_online(a, sim, traces, mode, seed),
            Policy::Mpc(c) => traces
                .par_iter()
                .map(|t| mpc_rollout(sim, t, c, &EpisodeConfig::default()))
                .collect(),
        }
    }

    /// Median and mean wall time of one decision, in microseconds.
    fn decision_time_us(&self, sim: &Simulator, trace: &Trace, passes: usize) -> Result<(f64, f64), AbrError> {
        let state = sim.initial_state(trace, 0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut times = Vec::with_capacity(passes);
        for _ in 0..passes {
            let t = Instant::now();
            let a = match self {
                Policy::Offline(p) => sample_action(p, &state, &mut rng, ActionMode::Argmax)?,
                Policy::Tuned(p) => p.probs(&state)?.len(),
                Policy::Mpc(c) => mpc_select(sim, &state, &predict(sim, &state, trace, c)?)?,
            };
            std::hint::black_box(a);
            times.push(t.elapsed().as_secs_f64() * 1e6);
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        times.sort_by(f64::total_cmp);
        let n = times.len();
        let median = if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) };
        Ok((median, mean))
    }
}

fn load_policy(ctx: &Context, source: Option<&PolicySource>) -> Result<Policy, CliError> {
    Ok(match source {
        None => Policy::Offline(load_offline(&ctx.out.join(OFFLINE_CHECKPOINT))?.0),
        Some(PolicySource::Checkpoint { path }) => Policy::Offline(load_offline(&ctx.plan.resolve(path))?.0),
        Some(PolicySource::Tuned { path, base }) => {
            Policy::Tuned(load_tuned(&ctx.plan.resolve(path), &ctx.plan.resolve(base))?.0)
        }
        Some(src @ PolicySource::Mpc { .. }) => {
            let mut cfg = src.mpc_config().expect("mpc source");
            if let Some(h) = ctx.args.horizon {
                cfg.horizon = h;
            }
            Policy::Mpc(cfg)
        }
    })
}

/// Means of the per-trace QoE decomposition: qoe, quality, variation, rebuffer.
pub fn summarize(reports: &[EpisodeReport]) -> [f64; 4] {
    let n = reports.len() as f64;
    let mut s = [0.0; 4];
    for r in reports {
        s[0] += r.mean_qoe();
        s[1] += r.mean_quality();
        s[2] += r.mean_variation();
        s[3] += r.mean_rebuffer_s();
    }
    s.map(|v| v / n)
}

fn eval(ctx: &Context) -> Result<(), CliError> {
    let e = section(&ctx.plan.plan.eval, "eval")?;
    let sim = Simulator::new(ctx.env())?;
    let traces = ctx.load(&e.traces, sim.config().history_len)?;
    if traces.is_empty() {
        return Err(AbrError::Validation("no evaluation traces".into()).into());
    }
    let policy = load_policy(ctx, e.policy.as_ref())?;
    let reports = policy.evaluate(&sim, &traces, e.action_mode, ctx.seed)?;

    let body = csv_bytes(
        &["trace_id", "chunks", "mean_qoe", "mean_quality", "mean_variation", "mean_rebuffer_s", "total_reward", "discounted_return"],
        |w| {
            for r in &reports {
                w.write_record([
                    r.trace_id.clone(),
                    r.len().to_string(),
                    r.mean_qoe().to_string(),
                    r.mean_quality().to_string(),
                    r.mean_variation().to_string(),
                    r.mean_rebuffer_s().to_string(),
                    r.total_reward.to_string(),
                    r.discounted_return.to_string(),
                ])?;
            }
            Ok(())
        },
    )?;
    ctx.write_csv(EVAL_PER_TRACE, body)?;

    let s = summarize(&reports);
    let body = csv_bytes(
        &["policy", "traces", "mean_qoe", "mean_quality", "mean_variation", "mean_rebuffer_s"],
        |w| {
            w.write_record([
                policy.label(),
                reports.len().to_string(),
                s[0].to_string(),
                s[1].to_string(),
                s[2].to_string(),
                s[3].to_string(),
            ])
        },
    )?;
    ctx.write_csv(EVAL_SUMMARY, body)?;

    if e.chunks {
        let mut body = Vec::new();
        write_episode_csv(&reports, &mut body)?;
        ctx.write_csv(EVAL_CHUNKS, body)?;
    }
    if e.timing {
        if e.timing_passes < 1000 {
            return Err(CliError::Config("timing_passes must be at least 1000".into()));
        }
        let (median, mean) = policy.decision_time_us(&sim, &traces[0], e.timing_passes)?;
        let body = csv_bytes(&["policy", "passes", "median_us", "mean_us"], |w| {
            w.write_record([policy.label(), e.timing_passes.to_string(), median.to_string(), mean.to_string()])
        })?;
        ctx.write_csv(INFERENCE_TIME, body)?;
    }
    Ok(())
}

struct CellResult {
    summary: [f64; 4],
    best_epoch: usize,
    train_ms: u128,
    inference_us: f64,
}

fn run_cell(ctx: &Context, env: &EnvConfig, spec: &AgentSpec, timing: bool) -> Result<CellResult, CliError> {
    let e = section(&ctx.plan.plan.eval, "eval")?;
    let (agent, log, train_ms) = train_pair(ctx, env, spec)?;
    let sim = Simulator::new(env.clone())?;
    let test = ctx.load(&e.traces, env.history_len)?;
    let reports = evaluate_agent(&agent, &sim, &test, e.action_mode, ctx.seed)?;
    let inference_us = match (timing, test.first()) {
        (true, Some(t)) => Policy::Offline(agent).decision_time_us(&sim, t, e.timing_passes.max(1000))?.0,
        _ => 0.0,
    };
    Ok(CellResult {
        summary: summarize(&reports),
        best_epoch: log.best_epoch,
        train_ms: if timing { train_ms } else { 0 },
        inference_us,
    })
}

fn sweep(ctx: &Context) -> Result<(), CliError> {
    let default = SweepSection::default();
    let s = ctx.plan.plan.sweep.as_ref().unwrap_or(&default);
    if s.layers.contains(&0) || s.neurons.contains(&0) || s.k_values.contains(&0) {
        return Err(CliError::Config("sweep grids must hold positive values".into()));
    }
    let env = ctx.env();
    let spec = ctx.agent_spec();

    let grid: Vec<(usize, usize)> = s.layers.iter().flat_map(|&l| s.neurons.iter().map(move |&n| (l, n))).collect();
    let cells = grid
        .par_iter()
        .map(|&(l, n)| {
            let spec = AgentSpec { actor_hidden: vec![n; l], critic_hidden: vec![n; l], ..spec.clone() };
            run_cell(ctx, &env, &spec, false)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let body = csv_bytes(&["layers", "neurons", "mean_test_qoe", "best_epoch"], |w| {
        for ((l, n), c) in grid.iter().zip(&cells) {
            w.write_record([l.to_string(), n.to_string(), c.summary[0].to_string(), c.best_epoch.to_string()])?;
        }
        Ok(())
    })?;
    ctx.write_csv(HEATMAP, body)?;

    if !s.k_values.is_empty() {
        let cells = s
            .k_values
            .par_iter()
            .map(|&k| {
                let env = EnvConfig { history_len: k, ..env.clone() };
                let spec = AgentSpec { history_len: k, ..spec.clone() };
                run_cell(ctx, &env, &spec, s.timing)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let body = csv_bytes(&["k", "mean_test_qoe", "inference_us", "train_ms"], |w| {
            for (k, c) in s.k_values.iter().zip(&cells) {
                w.write_record([k.to_string(), c.summary[0].to_string(), c.inference_us.to_string(), c.train_ms.to_string()])?;
            }
            Ok(())
        })?;
        ctx.write_csv(K_SWEEP, body)?;
    }

    if !s.weights.is_empty() {
        let cells = s
            .weights
            .par_iter()
            .map(|&[alpha, beta_rebuf]| {
                let env = EnvConfig { weights: QoeWeights { alpha, beta_rebuf }, ..env.clone() };
                run_cell(ctx, &env, &spec, false)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let body = csv_bytes(
            &["alpha", "beta_rebuf", "mean_qoe", "mean_quality", "mean_variation", "mean_rebuffer_s"],
            |w| {
                for ([a, b], c) in s.weights.iter().zip(&cells) {
                    let [q, u, v, r] = c.summary;
                    w.write_record([a, b, &q, &u, &v, &r].map(|x| x.to_string()))?;
                }
                Ok(())
            },
        )?;
        ctx.write_csv(WEIGHT_SWEEP, body)?;
    }
    Ok(())
}
