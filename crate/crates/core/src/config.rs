//! Experiment configuration as read from and written to JSON.
//!
//! Every struct rejects unknown keys and fills missing ones from its
//! `Default`, so a config file only needs to list what it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::AgentConfig;
use crate::envs::{make_env, EnvSpec, LinearDynamics};
use crate::error::{Error, Result};
use crate::ofenet::OfeConfig;
use crate::replay::ReplayMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Collectors on their own threads, fed by published snapshots.
    Async,
    /// One vectorized collect step per gradient step on the learner thread.
    Sync,
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "async" => Ok(RunMode::Async),
            "sync" => Ok(RunMode::Sync),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub mode: ReplayMode,
    pub capacity: usize,
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub priority_eps: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            mode: ReplayMode::Prioritized,
            capacity: 100_000,
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            priority_eps: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: RunMode,
    pub n_core: usize,
    pub n_env: usize,
    pub gradient_steps: u64,
    /// Publish a new policy snapshot every this many gradient steps.
    pub snapshot_interval: u64,
    pub queue_capacity: usize,
    /// Async collectors pause once they are this many env steps per gradient
    /// step ahead of the learner (beyond warmup). `None` lets them run free.
    pub max_env_steps_per_gradient_step: Option<f64>,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// End the run early once an evaluation reaches this average return.
    pub stop_at_return: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Async,
            n_core: 2,
            n_env: 4,
            gradient_steps: 30_000,
            snapshot_interval: 1,
            queue_capacity: 4096,
            max_env_steps_per_gradient_step: Some(2.0),
            eval_interval: 1_000,
            eval_episodes: 5,
            stop_at_return: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Effective rank of Q1 features every this many gradient steps (0 disables).
    pub rank_interval: u64,
    pub probe_size: usize,
    pub rank_delta: f64,
    /// Rows of `(s, a, Q̂)` written for loss-surface scans at the end of a run (0 disables).
    pub surface_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            rank_interval: 5_000,
            probe_size: 2_048,
            rank_delta: 0.01,
            surface_samples: 1_024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: String,
    /// Override of the linear system's `(A, B, noise)`; only read for `linsys`.
    pub dynamics: Option<LinearDynamics>,
    pub ofenet: OfeConfig,
    pub agent: AgentConfig,
    pub replay: ReplayConfig,
    pub run: RunConfig,
    pub diagnostics: DiagnosticsConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "pendulum-sac".into(),
            env: "pendulum".into(),
            dynamics: None,
            ofenet: OfeConfig::default(),
            agent: AgentConfig::default(),
            replay: ReplayConfig::default(),
            run: RunConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        Ok(make_env(&self.env, self.dynamics.as_ref())?.spec().clone())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        self.env_spec()?;
        let r = &self.run;
        if r.n_core == 0 || r.n_env == 0 {
            return bad("n_core and n_env must be at least 1");
        }
        if r.snapshot_interval == 0 {
            return bad("snapshot_interval must be at least 1");
        }
        if r.queue_capacity == 0 {
            return bad("queue_capacity must be at least 1");
        }
        if r.eval_episodes == 0 {
            return bad("eval_episodes must be at least 1");
        }
        if let Some(x) = r.max_env_steps_per_gradient_step {
            if !(x > 0.0) {
                return bad("max_env_steps_per_gradient_step must be positive");
            }
        }
        let p = &self.replay;
        if p.capacity == 0 || p.capacity < self.agent.batch_size {
            return bad("replay capacity must hold at least one batch");
        }
        if !(p.priority_eps > 0.0) || p.alpha < 0.0 {
            return bad("priority_eps must be positive and alpha non-negative");
        }
        if self.agent.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.agent.tau) || !(0.0..=1.0).contains(&self.ofenet.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.agent.gamma) && self.agent.gamma != 1.0 {
            return bad("gamma must lie in [0, 1]");
        }
        let d = &self.diagnostics;
        if !(d.rank_delta > 0.0 && d.rank_delta < 1.0) {
            return bad("rank_delta must lie in (0, 1)");
        }
        Ok(())
    }

    /// Annotated defaults, for the generated reference file.
    pub fn reference() -> String {
        let mut s = String::new();
        s.push_str("# Experiment configuration reference\n\n");
        s.push_str("Every key is optional; missing keys take the values below and unknown keys are rejected.\n\n");
        s.push_str("```json\n");
        s.push_str(&Self::default().to_json());
        s.push_str("\n```\n\n");
        for (key, text) in REFERENCE_NOTES {
            s.push_str(&format!("- `{key}`: {text}\n"));
        }
        s
    }
}

const REFERENCE_NOTES: &[(&str, &str)] = &[
    ("env", "`pendulum`, `pointmass` or `linsys`."),
    ("dynamics", "`{a, b, noise}` override for `linsys`."),
    ("ofenet.enabled", "false turns both encoders into passthroughs (z_s = s, z_sa = [s, a])."),
    ("ofenet.state_block / action_block", "`{kind, layers, units, activation, batch_norm}`; kind is mlp, resnet, densenet or d2rl."),
    ("ofenet.tau", "Polyak coefficient of the target OFENet."),
    ("ofenet.batch_norm", "`{momentum, epsilon}` for every BN layer of the encoders."),
    ("ofenet.normalize_target", "standardize s' with running statistics before the prediction loss."),
    ("agent.kind", "`sac` or `td3`."),
    ("agent.huber_delta", "threshold of the Huber critic loss."),
    ("agent.warmup_steps", "random-action env steps before learning; null means 10000 (SAC) or 100000 (TD3)."),
    ("agent.joint_finetune", "let critic-loss gradients update the OFENet encoders."),
    ("replay.mode", "`prioritized` or `uniform`."),
    ("replay.beta_start / beta_end", "importance exponent, annealed linearly over run.gradient_steps."),
    ("run.mode", "`async` (threaded collectors) or `sync` (one collect step per gradient step, deterministic)."),
    ("run.n_core / n_env", "collector workers and environments per worker; WIDENET_THREADS caps the worker threads."),
    ("run.snapshot_interval", "gradient steps between policy snapshot publications."),
    ("run.max_env_steps_per_gradient_step", "async collector throttle relative to learner progress; null disables it."),
    ("run.stop_at_return", "finish early once an evaluation reaches this average return."),
    ("diagnostics.rank_interval", "gradient steps between effective-rank probes of Q1's penultimate features; 0 disables."),
    ("diagnostics.surface_samples", "(s, a, Q̂) rows stored at the end of a run for loss-surface scans; 0 disables."),
    ("seeds", "one run per seed for the grid and ablation drivers."),
];
