//! Learner/collector runtime.
//!
//! One learner owns every trainable value. Collectors act with immutable
//! policy snapshots and push transitions through a bounded queue; the learner
//! drains that queue between gradient steps. In sync mode the same pieces run
//! on one thread with exactly one vectorized collect step per gradient step.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, Batch, Behavior, Policy};
use crate::config::{ExperimentConfig, RunMode};
use crate::diagnostics::{collect_features, effective_rank, SurfaceDataset};
use crate::envs::{make_env, EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Tensor};
use crate::ofenet::OfeNet;
use crate::replay::{annealed_beta, PrioritizedBuffer, Transition};

const INIT_STREAM: u64 = 1;
const LEARNER_STREAM: u64 = 2;
const PROBE_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;
const COLLECTOR_STREAM: u64 = 16;

/// Generator type used for every seeded stream.
pub type StreamRng = ChaCha8Rng;

/// Independent generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Worker threads to use for `n_core` collectors, capped by `WIDENET_THREADS`.
pub fn worker_threads(n_core: usize) -> usize {
    let cap = std::env::var("WIDENET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v > 0);
    match cap {
        Some(c) => n_core.min(c).max(1),
        None => n_core.max(1),
    }
}

/// Immutable, versioned policy weights (`φ_s` followed by the actor).
#[derive(Debug)]
pub struct ParameterSnapshot {
    pub version: u64,
    pub weights: Vec<f64>,
    pub created: Instant,
}

/// Publication point. Readers get either the old or the new snapshot whole.
#[derive(Debug)]
pub struct SnapshotCell {
    inner: RwLock<Arc<ParameterSnapshot>>,
}

impl SnapshotCell {
    pub fn new(weights: Vec<f64>) -> Self {
        Self {
            inner: RwLock::new(Arc::new(ParameterSnapshot {
                version: 0,
                weights,
                created: Instant::now(),
            })),
        }
    }

    pub fn latest(&self) -> Arc<ParameterSnapshot> {
        self.inner.read().expect("snapshot lock").clone()
    }

    pub fn version(&self) -> u64 {
        self.latest().version
    }

    /// Publishes `weights` as version n + 1.
    pub fn publish(&self, weights: Vec<f64>) -> Arc<ParameterSnapshot> {
        let mut g = self.inner.write().expect("snapshot lock");
        let snap = Arc::new(ParameterSnapshot {
            version: g.version + 1,
            weights,
            created: Instant::now(),
        });
        *g = snap.clone();
        snap
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub gradient_step: u64,
    pub env_steps: u64,
    pub avg_return: f64,
    pub return_std: f64,
    pub aux_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub effective_rank_q1: Option<usize>,
    pub staleness_mean: Option<f64>,
}

pub const METRICS_HEADER: [&str; 9] = [
    "gradient_step",
    "env_steps",
    "avg_return",
    "return_std",
    "aux_loss",
    "critic_loss",
    "actor_loss",
    "effective_rank_q1",
    "staleness_mean",
];

/// Appends rows to a metrics CSV, flushing each one so partial logs survive.
pub struct MetricsWriter {
    w: csv::Writer<fs::File>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        w.write_record(METRICS_HEADER)?;
        w.flush()?;
        Ok(Self { w })
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<()> {
        self.w.serialize(row)?;
        self.w.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != METRICS_HEADER {
        return Err(Error::Config(format!("unexpected metrics header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Default, Clone, Debug)]
struct Window {
    aux: f64,
    critic: f64,
    actor: f64,
    steps: u64,
    actor_steps: u64,
    stale_sum: u64,
    stale_n: u64,
}

impl Window {
    fn mean(sum: f64, n: u64) -> Option<f64> {
        (n > 0).then(|| sum / n as f64)
    }
}

/// Owner of all trainable state: OFENet, agent, replay.
pub struct Learner {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub spec: EnvSpec,
    pub ofe: OfeNet,
    pub agent: Agent,
    pub buffer: PrioritizedBuffer,
    rng: ChaCha8Rng,
    probe_rng: ChaCha8Rng,
    version: u64,
    grad_steps: u64,
    env_steps: u64,
    window: Window,
    probe: Option<(Tensor, Tensor)>,
    last_rank: Option<usize>,
    max_staleness: u64,
    stale_sum: u64,
    stale_n: u64,
}

impl Learner {
    pub fn new(config: ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = config.env_spec()?;
        let mut init = stream_rng(seed, INIT_STREAM);
        let ofe = OfeNet::new(config.ofenet.clone(), spec.state_dim, spec.action_dim, &mut init)?;
        let agent = Agent::new(config.agent.clone(), &ofe, &spec, &mut init)?;
        let r = &config.replay;
        let buffer = PrioritizedBuffer::new(r.capacity, r.alpha, r.priority_eps, r.mode)?;
        Ok(Self {
            rng: stream_rng(seed, LEARNER_STREAM),
            probe_rng: stream_rng(seed, PROBE_STREAM),
            spec,
            ofe,
            agent,
            buffer,
            config,
            seed,
            version: 0,
            grad_steps: 0,
            env_steps: 0,
            window: Window::default(),
            probe: None,
            last_rank: None,
            max_staleness: 0,
            stale_sum: 0,
            stale_n: 0,
        })
    }

    pub fn gradient_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn max_staleness(&self) -> u64 {
        self.max_staleness
    }

    /// Mean policy lag (in published versions) over every ingested transition.
    pub fn mean_staleness(&self) -> f64 {
        if self.stale_n == 0 {
            0.0
        } else {
            self.stale_sum as f64 / self.stale_n as f64
        }
    }

    pub fn last_rank(&self) -> Option<usize> {
        self.last_rank
    }

    /// The acting half at the current weights.
    pub fn policy(&self) -> Policy {
        self.agent.policy(&self.ofe)
    }

    pub fn policy_weights(&self) -> Vec<f64> {
        let mut v = self.ofe.phi_s.params.flatten();
        v.extend(self.agent.actor.params.flatten());
        v
    }

    /// Publishes the current policy and adopts the new version number.
    pub fn publish_snapshot(&mut self, cell: &SnapshotCell) -> Arc<ParameterSnapshot> {
        let snap = cell.publish(self.policy_weights());
        self.version = snap.version;
        snap
    }

    /// Stores a transition and records how many versions old its policy was.
    pub fn ingest(&mut self, t: Transition) -> Result<()> {
        let stale = self.version.checked_sub(t.version).ok_or_else(|| {
            Error::State(format!(
                "transition from version {} is newer than learner version {}",
                t.version, self.version
            ))
        })?;
        self.max_staleness = self.max_staleness.max(stale);
        self.stale_sum += stale;
        self.stale_n += 1;
        self.window.stale_sum += stale;
        self.window.stale_n += 1;
        self.buffer.add(t, None)?;
        self.env_steps += 1;
        Ok(())
    }

    /// Whether warmup is over and a full batch can be drawn.
    pub fn ready(&self) -> bool {
        self.agent.warmup_policy(self.env_steps) == Behavior::Policy
            && self.buffer.len() >= self.config.agent.batch_size
    }

    /// OFENet update, then the agent update, on one prioritized batch.
    pub fn gradient_step(&mut self) -> Result<()> {
        let r = &self.config.replay;
        let beta = annealed_beta(r.beta_start, r.beta_end, self.grad_steps, self.config.run.gradient_steps);
        let sb = self.buffer.sample(self.config.agent.batch_size, beta, &mut self.rng)?;
        let batch = Batch::from_transitions(&sb.transitions, Some(&sb.is_weights))?;
        let aux = self.ofe.update(&batch.s, &batch.a, &batch.s_next)?;
        let rep = self.agent.train_step(&mut self.ofe, &batch, &mut self.rng)?;
        self.buffer.update_priorities(&sb.indices, &rep.critic.td_errors)?;
        self.grad_steps += 1;
        self.window.aux += aux;
        self.window.critic += rep.critic.loss;
        self.window.steps += 1;
        if let Some(a) = rep.actor {
            self.window.actor += a.loss;
            self.window.actor_steps += 1;
        }
        let d = &self.config.diagnostics;
        if d.rank_interval > 0 && self.grad_steps % d.rank_interval == 0 {
            self.last_rank = Some(self.probe_rank()?);
        }
        Ok(())
    }

    fn uniform_rows(&mut self, n: usize) -> Vec<Transition> {
        let n = n.min(self.buffer.len());
        (0..n)
            .map(|_| {
                let i = self.probe_rng.gen_range(0..self.buffer.len());
                self.buffer.transition(i).expect("live slot").clone()
            })
            .collect()
    }

    /// Effective rank of Q1's penultimate features on a probe batch drawn
    /// once per run.
    pub fn probe_rank(&mut self) -> Result<usize> {
        if self.probe.is_none() {
            let rows = self.uniform_rows(self.config.diagnostics.probe_size);
            let b = Batch::from_transitions(&rows, None)?;
            self.probe = Some((b.s, b.a));
        }
        let (s, a) = self.probe.as_ref().expect("probe drawn");
        let phi = collect_features(&self.ofe, &self.agent.q1, s, a)?;
        effective_rank(&phi, self.config.diagnostics.rank_delta)
    }

    /// `(s, a, Q̂)` rows with targets from the current target networks, frozen.
    pub fn surface_dataset(&mut self, n: usize) -> Result<SurfaceDataset> {
        let rows = self.uniform_rows(n);
        let b = Batch::from_transitions(&rows, None)?;
        let noise = self.agent.sample_noise(b.len(), &mut self.probe_rng);
        let q_hat = self.agent.critic_targets(&self.ofe, &b, &noise)?;
        Ok(SurfaceDataset { s: b.s, a: b.a, q_hat })
    }

    fn take_row(&mut self, avg_return: f64, return_std: f64) -> MetricsRow {
        let w = std::mem::take(&mut self.window);
        MetricsRow {
            gradient_step: self.grad_steps,
            env_steps: self.env_steps,
            avg_return,
            return_std,
            aux_loss: self.ofe.enabled().then(|| Window::mean(w.aux, w.steps)).flatten(),
            critic_loss: Window::mean(w.critic, w.steps),
            actor_loss: Window::mean(w.actor, w.actor_steps),
            effective_rank_q1: self.last_rank,
            staleness_mean: (w.stale_n > 0).then(|| w.stale_sum as f64 / w.stale_n as f64),
        }
    }

    /// Deterministic rollouts of the current policy on evaluation seeds.
    pub fn evaluate(&self, episodes: usize) -> Result<(f64, f64)> {
        evaluate(&self.policy(), &self.config, episodes, self.seed)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.to_json(), self.seed);
        for (name, net) in self.ofe.named_networks().into_iter().chain(self.agent.named_networks()) {
            ck.push_set(name, &net.params);
        }
        ck.push_set("agent.temperature", &self.agent.log_alpha);
        ck
    }

    /// Rebuilds networks from a checkpoint alone (the config is embedded).
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.verify_hash()?;
        let config = ExperimentConfig::from_json(&ck.config_json)?;
        let mut l = Self::new(config, ck.seed)?;
        for (name, net) in l.ofe.named_networks_mut() {
            ck.load_set(name, &mut net.params)?;
        }
        for (name, net) in l.agent.named_networks_mut() {
            ck.load_set(name, &mut net.params)?;
        }
        ck.load_set("agent.temperature", &mut l.agent.log_alpha)?;
        Ok(l)
    }
}

/// Runs one episode per environment in lockstep with the deterministic
/// policy, starting from the given states. Returns the undiscounted returns.
pub fn rollout(policy: &Policy, envs: &mut [Box<dyn Environment>], mut states: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let mut returns = vec![0.0; envs.len()];
    let mut live: Vec<usize> = (0..envs.len()).collect();
    let mut rng = stream_rng(0, 0);
    while !live.is_empty() {
        let s = Tensor::from_rows(&live.iter().map(|&i| states[i].clone()).collect::<Vec<_>>())?;
        let a = policy.act(&s, false, &mut rng)?;
        let mut next_live = Vec::with_capacity(live.len());
        for (k, &i) in live.iter().enumerate() {
            let st = envs[i].step(a.row(k))?;
            returns[i] += st.reward;
            states[i] = st.state.clone();
            if !st.done() {
                next_live.push(i);
            }
        }
        live = next_live;
    }
    Ok(returns)
}

/// Mean and (population) standard deviation of deterministic returns over
/// `episodes` evaluation episodes, seeded independently of training.
pub fn evaluate(policy: &Policy, config: &ExperimentConfig, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut seeds = stream_rng(seed, EVAL_STREAM);
    let mut envs = Vec::with_capacity(episodes);
    let mut states = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut e = make_env(&config.env, config.dynamics.as_ref())?;
        states.push(e.reset(seeds.gen()));
        envs.push(e);
    }
    let r = rollout(policy, &mut envs, states)?;
    let mean = r.iter().sum::<f64>() / episodes as f64;
    let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / episodes as f64;
    Ok((mean, var.sqrt()))
}

/// A worker's vectorized environments plus its local policy copy.
pub struct Collector {
    spec: EnvSpec,
    envs: Vec<Box<dyn Environment>>,
    states: Vec<Vec<f64>>,
    policy: Policy,
    version: u64,
    rng: ChaCha8Rng,
    steps: u64,
}

impl Collector {
    pub fn new(config: &ExperimentConfig, policy: Policy, seed: u64, worker: usize) -> Result<Self> {
        let mut rng = stream_rng(seed, COLLECTOR_STREAM + worker as u64);
        let mut envs = Vec::with_capacity(config.run.n_env);
        let mut states = Vec::with_capacity(config.run.n_env);
        for _ in 0..config.run.n_env {
            let mut e = make_env(&config.env, config.dynamics.as_ref())?;
            states.push(e.reset(rng.gen()));
            envs.push(e);
        }
        Ok(Self {
            spec: envs[0].spec().clone(),
            envs,
            states,
            policy,
            version: 0,
            rng,
            steps: 0,
        })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Adopts `snap` if it is newer than the local copy.
    pub fn sync_to(&mut self, snap: &ParameterSnapshot) -> Result<()> {
        if snap.version != self.version {
            self.policy.load_flat(&snap.weights)?;
            self.version = snap.version;
        }
        Ok(())
    }

    /// One step of every environment. Finished episodes are reset right away.
    pub fn step(&mut self, behavior: Behavior) -> Result<Vec<Transition>> {
        let actions: Vec<Vec<f64>> = match behavior {
            Behavior::Random => (0..self.envs.len()).map(|_| self.spec.sample_action(&mut self.rng)).collect(),
            Behavior::Policy => {
                let s = Tensor::from_rows(&self.states)?;
                let a = self.policy.act(&s, true, &mut self.rng)?;
                (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
            }
        };
        let mut out = Vec::with_capacity(self.envs.len());
        for (i, a) in actions.into_iter().enumerate() {
            let st = self.envs[i].step(&a)?;
            let finished = st.done();
            let s_next = st.state.clone();
            out.push(Transition {
                s: std::mem::replace(&mut self.states[i], st.state),
                a,
                r: st.reward,
                s_next,
                done: st.terminal,
                version: self.version,
            });
            if finished {
                self.states[i] = self.envs[i].reset(self.rng.gen());
            }
        }
        self.steps += out.len() as u64;
        Ok(out)
    }
}

/// What a finished (or aborted) run leaves behind.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub gradient_steps: u64,
    pub env_steps: u64,
    pub max_avg_return: Option<f64>,
    pub stopped_early: bool,
    /// Gradient steps per second from the first gradient step to the end.
    pub learner_rate: f64,
    pub max_staleness: u64,
    pub mean_staleness: f64,
    pub elapsed: Duration,
}

#[derive(Serialize)]
struct SeedRecord {
    seed: u64,
    init_stream: u64,
    learner_stream: u64,
    probe_stream: u64,
    eval_stream: u64,
    collector_stream_base: u64,
    mode: RunMode,
}

struct Run {
    learner: Learner,
    cell: Arc<SnapshotCell>,
    writer: MetricsWriter,
    rows: Vec<MetricsRow>,
    started: Option<Instant>,
    stopped_early: bool,
}

impl Run {
    /// Snapshot publication and evaluation after a gradient step. Returns
    /// true when the run should stop.
    fn after_step(&mut self) -> Result<bool> {
        let rc = &self.learner.config.run;
        let (interval, eval_every, episodes, stop_at, total) =
            (rc.snapshot_interval, rc.eval_interval, rc.eval_episodes, rc.stop_at_return, rc.gradient_steps);
        let g = self.learner.gradient_steps();
        if g % interval == 0 {
            self.learner.publish_snapshot(&self.cell);
        }
        if (eval_every > 0 && g % eval_every == 0) || g == total {
            let (m, s) = self.learner.evaluate(episodes)?;
            let row = self.learner.take_row(m, s);
            self.writer.push(&row)?;
            self.rows.push(row);
            if stop_at.is_some_and(|t| m >= t) {
                self.stopped_early = g < total;
                return Ok(true);
            }
        }
        Ok(g >= total)
    }
}

/// Trains one seed and writes `config.json`, `seeds.json`, `metrics.csv`,
/// `checkpoint.bin` and the diagnostics datasets into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    config.save(out_dir.join("config.json"))?;
    let seeds = SeedRecord {
        seed,
        init_stream: INIT_STREAM,
        learner_stream: LEARNER_STREAM,
        probe_stream: PROBE_STREAM,
        eval_stream: EVAL_STREAM,
        collector_stream_base: COLLECTOR_STREAM,
        mode: config.run.mode,
    };
    fs::write(out_dir.join("seeds.json"), serde_json::to_string_pretty(&seeds)?)?;
    let t0 = Instant::now();
    let learner = Learner::new(config.clone(), seed)?;
    let cell = Arc::new(SnapshotCell::new(learner.policy_weights()));
    let mut run = Run {
        learner,
        cell,
        writer: MetricsWriter::create(out_dir.join("metrics.csv"))?,
        rows: Vec::new(),
        started: None,
        stopped_early: false,
    };
    let outcome = match config.run.mode {
        RunMode::Sync => run_sync(&mut run, seed),
        RunMode::Async => run_async(&mut run, seed),
    };
    let learner_time = run.started.map(|t| t.elapsed()).unwrap_or_default();
    outcome?;
    finish(&mut run, out_dir)?;
    let g = run.learner.gradient_steps();
    Ok(RunSummary {
        seed,
        out_dir: out_dir.to_path_buf(),
        max_avg_return: run.rows.iter().map(|r| r.avg_return).reduce(f64::max),
        gradient_steps: g,
        env_steps: run.learner.env_steps(),
        stopped_early: run.stopped_early,
        learner_rate: if learner_time.is_zero() { 0.0 } else { g as f64 / learner_time.as_secs_f64() },
        max_staleness: run.learner.max_staleness(),
        mean_staleness: run.learner.mean_staleness(),
        elapsed: t0.elapsed(),
        rows: run.rows,
    })
}

fn finish(run: &mut Run, out_dir: &Path) -> Result<()> {
    let l = &mut run.learner;
    l.checkpoint().save(out_dir.join("checkpoint.bin"))?;
    let n = l.config.diagnostics.surface_samples;
    if n > 0 && !l.buffer.is_empty() {
        l.surface_dataset(n)?.save(out_dir.join("surface_dataset.csv"))?;
    }
    if l.probe.is_none() && l.config.diagnostics.rank_interval > 0 && !l.buffer.is_empty() {
        l.probe_rank()?;
    }
    if let Some((s, a)) = &l.probe {
        let ds = SurfaceDataset {
            s: s.clone(),
            a: a.clone(),
            q_hat: vec![0.0; s.rows()],
        };
        ds.save(out_dir.join("probe.csv"))?;
    }
    Ok(())
}

fn run_sync(run: &mut Run, seed: u64) -> Result<()> {
    let rc = run.learner.config.run.clone();
    let mut collectors = (0..rc.n_core)
        .map(|w| Collector::new(&run.learner.config, run.learner.policy(), seed, w))
        .collect::<Result<Vec<_>>>()?;
    loop {
        let behavior = run.learner.agent.warmup_policy(run.learner.env_steps());
        let snap = run.cell.latest();
        for c in &mut collectors {
            c.sync_to(&snap)?;
            for t in c.step(behavior)? {
                run.learner.ingest(t)?;
            }
        }
        if !run.learner.ready() {
            continue;
        }
        run.started.get_or_insert_with(Instant::now);
        run.learner.gradient_step()?;
        if run.after_step()? {
            return Ok(());
        }
    }
}

fn run_async(run: &mut Run, seed: u64) -> Result<()> {
    let rc = run.learner.config.run.clone();
    let warmup = run.learner.config.agent.warmup();
    let threads = worker_threads(rc.n_core);
    let capacity = (rc.queue_capacity / rc.n_env).max(1);
    let (tx, rx) = bounded::<Vec<Transition>>(capacity);
    let collected = Arc::new(AtomicU64::new(0));
    let learned = Arc::new(AtomicU64::new(0));
    let stop = Arc::new(AtomicBool::new(false));
    let cell = run.cell.clone();

    let mut handles = Vec::with_capacity(threads);
    for t in 0..threads {
        let mut mine = Vec::new();
        for w in (t..rc.n_core).step_by(threads) {
            mine.push(Collector::new(&run.learner.config, run.learner.policy(), seed, w)?);
        }
        let (tx, collected, learned, stop, cell) =
            (tx.clone(), collected.clone(), learned.clone(), stop.clone(), cell.clone());
        let ratio = rc.max_env_steps_per_gradient_step;
        handles.push(thread::spawn(move || -> Result<()> {
            while !stop.load(Ordering::Acquire) {
                let done = collected.load(Ordering::Acquire);
                if let Some(r) = ratio {
                    let allowed = warmup as f64 + r * learned.load(Ordering::Acquire) as f64;
                    if done as f64 >= allowed {
                        thread::sleep(Duration::from_micros(200));
                        continue;
                    }
                }
                let behavior = if done < warmup { Behavior::Random } else { Behavior::Policy };
                for c in &mut mine {
                    c.sync_to(&cell.latest())?;
                    let ts = c.step(behavior)?;
                    collected.fetch_add(ts.len() as u64, Ordering::AcqRel);
                    if tx.send(ts).is_err() {
                        return Ok(());
                    }
                }
            }
            Ok(())
        }));
    }
    drop(tx);

    let result = learn_async(run, &rx, &learned, &handles);
    stop.store(true, Ordering::Release);
    drop(rx);
    let mut worker_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => worker_err = worker_err.or(Some(e)),
            Err(_) => worker_err = worker_err.or(Some(Error::Worker("collector thread panicked".into()))),
        }
    }
    result?;
    match worker_err {
        Some(e) => Err(Error::Worker(format!("collector failed: {e}"))),
        None => Ok(()),
    }
}

fn learn_async(
    run: &mut Run,
    rx: &Receiver<Vec<Transition>>,
    learned: &AtomicU64,
    handles: &[thread::JoinHandle<Result<()>>],
) -> Result<()> {
    let check_workers = || {
        if handles.iter().any(|h| h.is_finished()) {
            Err(Error::Worker("a collector stopped unexpectedly; run aborted".into()))
        } else {
            Ok(())
        }
    };
    loop {
        while let Ok(ts) = rx.try_recv() {
            for t in ts {
                run.learner.ingest(t)?;
            }
        }
        if !run.learner.ready() {
            match rx.recv_timeout(Duration::from_millis(5)) {
                Ok(ts) => {
                    for t in ts {
                        run.learner.ingest(t)?;
                    }
                }
                Err(RecvTimeoutError::Timeout) => check_workers()?,
                Err(RecvTimeoutError::Disconnected) => check_workers()?,
            }
            continue;
        }
        run.started.get_or_insert_with(Instant::now);
        run.learner.gradient_step()?;
        learned.store(run.learner.gradient_steps(), Ordering::Release);
        if run.after_step()? {
            return Ok(());
        }
        if run.learner.gradient_steps() % 64 == 0 {
            check_workers()?;
        }
    }
}

/// Learner-only gradient-step rate: the buffer is filled with random-policy
/// data first, then `steps` gradient steps are timed with no collectors.
pub fn learner_only_rate(config: &ExperimentConfig, seed: u64, steps: u64) -> Result<f64> {
    let mut l = Learner::new(config.clone(), seed)?;
    let mut c = Collector::new(config, l.policy(), seed, 0)?;
    while !l.ready() {
        for t in c.step(Behavior::Random)? {
            l.ingest(t)?;
        }
    }
    let t0 = Instant::now();
    for _ in 0..steps {
        l.gradient_step()?;
    }
    Ok(steps as f64 / t0.elapsed().as_secs_f64())
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Pendulum;

    fn tiny(mode: RunMode) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.run.mode = mode;
        c.run.n_core = 2;
        c.run.n_env = 2;
        c.run.gradient_steps = 40;
        c.run.eval_interval = 20;
        c.run.eval_episodes = 2;
        c.agent.warmup_steps = Some(64);
        c.agent.batch_size = 16;
        c.agent.actor_block.units = 8;
        c.agent.critic_block.units = 8;
        c.diagnostics.rank_interval = 20;
        c.diagnostics.probe_size = 32;
        c.diagnostics.surface_samples = 16;
        c
    }

    #[test]
    fn snapshot_versions_increase_by_one() {
        let cell = SnapshotCell::new(vec![0.0]);
        assert_eq!(cell.version(), 0);
        let a = cell.publish(vec![1.0]);
        let b = cell.publish(vec![2.0]);
        assert_eq!((a.version, b.version), (1, 2));
        assert_eq!(cell.latest().weights, vec![2.0]);
        // an older reader keeps its snapshot intact
        assert_eq!(a.weights, vec![1.0]);
    }

    #[test]
    fn sync_runs_are_reproducible() {
        let c = tiny(RunMode::Sync);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = run_experiment(&c, 7, d1.path()).unwrap();
        let r2 = run_experiment(&c, 7, d2.path()).unwrap();
        assert_eq!(r1.rows, r2.rows);
        assert_eq!(r1.gradient_steps, 40);
        assert_eq!(r1.rows.len(), 2);
        assert!(r1.rows[1].effective_rank_q1.is_some());
        let back = read_metrics(d1.path().join("metrics.csv")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].gradient_step, 40);
        for f in ["config.json", "seeds.json", "checkpoint.bin", "surface_dataset.csv", "probe.csv"] {
            assert!(d1.path().join(f).exists(), "{f} missing");
        }
        let a = std::fs::read(d1.path().join("checkpoint.bin")).unwrap();
        let b = std::fs::read(d2.path().join("checkpoint.bin")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_restores_policy() {
        let c = tiny(RunMode::Sync);
        let d = tempfile::tempdir().unwrap();
        run_experiment(&c, 3, d.path()).unwrap();
        let ck = Checkpoint::load(d.path().join("checkpoint.bin")).unwrap();
        let l = Learner::from_checkpoint(&ck).unwrap();
        assert_eq!(l.config, c);
        let (m1, _) = l.evaluate(2).unwrap();
        let (m2, _) = l.evaluate(2).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn async_run_completes_with_bounded_staleness() {
        let c = tiny(RunMode::Async);
        let d = tempfile::tempdir().unwrap();
        let r = run_experiment(&c, 5, d.path()).unwrap();
        assert_eq!(r.gradient_steps, 40);
        assert!(r.env_steps >= 64);
        assert!(r.mean_staleness >= 0.0);
        assert!(r.mean_staleness <= r.max_staleness as f64);
        // throttle: warmup + 2 per step, plus one in-flight batch per worker
        assert!(r.env_steps <= 64 + 2 * 40 + 2 * 2 * 2 + 64, "env steps {}", r.env_steps);
    }

    #[test]
    fn single_episode_has_zero_std() {
        let l = Learner::new(tiny(RunMode::Sync), 1).unwrap();
        let (_, sd) = l.evaluate(1).unwrap();
        assert_eq!(sd, 0.0);
    }

    #[test]
    fn zero_policy_rollout_matches_closed_loop() {
        // a zeroed actor head gives zero torque, so the return is the
        // unforced pendulum's accumulated cost
        let mut l = Learner::new(tiny(RunMode::Sync), 1).unwrap();
        let n = l.agent.actor.params.numel();
        l.agent.actor.params.load_flat(&vec![0.0; n]).unwrap();
        let policy = l.policy();
        let mut env = Pendulum::new();
        let s0 = env.reset_to(0.5, 0.0);
        let mut envs: Vec<Box<dyn Environment>> = vec![Box::new(env)];
        let got = rollout(&policy, &mut envs, vec![s0]).unwrap()[0];
        let (mut th, mut thd, mut want) = (0.5f64, 0.0f64, 0.0);
        for _ in 0..200 {
            want += Pendulum::reward(th, thd, 0.0);
            thd = (thd + (3.0 * 10.0 / 2.0 * th.sin()) * 0.05).clamp(-8.0, 8.0);
            th += thd * 0.05;
        }
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}
