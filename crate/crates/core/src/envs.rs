//! Small continuous-control environments.
//!
//! All dynamics are pure functions of state, action and the environment's own
//! seeded RNG stream, so a fixed seed reproduces a trajectory bit for bit.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn action_scale(&self) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| 0.5 * (h - l))
            .collect()
    }

    pub fn action_center(&self) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| 0.5 * (h + l))
            .collect()
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(&l, &h)| rng.gen_range(l..=h))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    /// True environment termination (no bootstrapping past it).
    pub terminal: bool,
    /// Episode ended by the time limit; the next state is still bootstrapped.
    pub truncated: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Step>;
    /// Number of actions that had to be clipped into bounds so far.
    fn clipped_actions(&self) -> u64;
}

/// Shared episode bookkeeping: step counter, done flag, clipping counter.
#[derive(Clone, Debug, Default)]
struct Episode {
    steps: usize,
    done: bool,
    started: bool,
    clipped: u64,
}

impl Episode {
    fn begin(&mut self) {
        self.steps = 0;
        self.done = false;
        self.started = true;
    }

    fn check(&self) -> Result<()> {
        if !self.started {
            return Err(Error::State("step called before reset".into()));
        }
        if self.done {
            return Err(Error::State("step called on a finished episode".into()));
        }
        Ok(())
    }

    fn clip(&mut self, spec: &EnvSpec, action: &[f64]) -> Result<Vec<f64>> {
        if action.len() != spec.action_dim {
            return Err(Error::Shape(format!(
                "{} expects {} action dims, got {}",
                spec.name,
                spec.action_dim,
                action.len()
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("action".into()));
        }
        let mut out = Vec::with_capacity(action.len());
        let mut clipped = false;
        for ((&a, &l), &h) in action.iter().zip(&spec.action_low).zip(&spec.action_high) {
            let c = a.clamp(l, h);
            clipped |= c != a;
            out.push(c);
        }
        if clipped {
            self.clipped += 1;
        }
        Ok(out)
    }

    fn advance(&mut self, spec: &EnvSpec) -> bool {
        self.steps += 1;
        let truncated = self.steps >= spec.max_episode_steps;
        self.done = truncated;
        truncated
    }
}

pub fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Torque-limited pendulum swing-up; angle 0 is upright.
#[derive(Clone, Debug)]
pub struct Pendulum {
    spec: EnvSpec,
    pub theta: f64,
    pub theta_dot: f64,
    ep: Episode,
}

impl Pendulum {
    pub const G: f64 = 10.0;
    pub const M: f64 = 1.0;
    pub const L: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;

    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "pendulum".into(),
                state_dim: 3,
                action_dim: 1,
                action_low: vec![-Self::MAX_TORQUE],
                action_high: vec![Self::MAX_TORQUE],
                max_episode_steps: 200,
            },
            theta: 0.0,
            theta_dot: 0.0,
            ep: Episode::default(),
        }
    }

    pub fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    /// Places the pendulum at an explicit state and starts an episode there.
    pub fn reset_to(&mut self, theta: f64, theta_dot: f64) -> Vec<f64> {
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.ep.begin();
        self.observe()
    }

    pub fn reward(theta: f64, theta_dot: f64, u: f64) -> f64 {
        let th = angle_normalize(theta);
        -(th * th + 0.1 * theta_dot * theta_dot + 0.001 * u * u)
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let th = rng.gen_range(-PI..=PI);
        let thd = rng.gen_range(-1.0..=1.0);
        self.reset_to(th, thd)
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        self.ep.check()?;
        let u = self.ep.clip(&self.spec, action)?[0];
        let reward = Self::reward(self.theta, self.theta_dot, u);
        let acc = 3.0 * Self::G / (2.0 * Self::L) * self.theta.sin()
            + 3.0 / (Self::M * Self::L * Self::L) * u;
        let thd = (self.theta_dot + acc * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta += thd * Self::DT;
        self.theta_dot = thd;
        let truncated = self.ep.advance(&self.spec);
        Ok(Step {
            state: self.observe(),
            reward,
            terminal: false,
            truncated,
        })
    }

    fn clipped_actions(&self) -> u64 {
        self.ep.clipped
    }
}

/// Planar double integrator that should be driven to the origin.
#[derive(Clone, Debug)]
pub struct PointMass {
    spec: EnvSpec,
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    ep: Episode,
}

impl PointMass {
    pub const DT: f64 = 0.1;

    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "pointmass".into(),
                state_dim: 4,
                action_dim: 2,
                action_low: vec![-1.0, -1.0],
                action_high: vec![1.0, 1.0],
                max_episode_steps: 200,
            },
            pos: [0.0; 2],
            vel: [0.0; 2],
            ep: Episode::default(),
        }
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
        self.vel = [0.0; 2];
        self.ep.begin();
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        self.ep.check()?;
        let u = self.ep.clip(&self.spec, action)?;
        let pos2 = self.pos[0] * self.pos[0] + self.pos[1] * self.pos[1];
        let u2 = u[0] * u[0] + u[1] * u[1];
        let reward = -pos2 - 0.01 * u2;
        for i in 0..2 {
            self.vel[i] += u[i] * Self::DT;
            self.pos[i] += self.vel[i] * Self::DT;
        }
        let truncated = self.ep.advance(&self.spec);
        Ok(Step {
            state: self.observe(),
            reward,
            terminal: false,
            truncated,
        })
    }

    fn clipped_actions(&self) -> u64 {
        self.ep.clipped
    }
}

/// `s' = A s + B a + noise · ξ` dynamics block as written in configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearDynamics {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    #[serde(default)]
    pub noise: f64,
}

impl Default for LinearDynamics {
    fn default() -> Self {
        Self {
            a: vec![
                vec![0.9, 0.2, 0.0, 0.0],
                vec![-0.2, 0.9, 0.0, 0.0],
                vec![0.0, 0.0, 0.8, 0.3],
                vec![0.0, 0.0, -0.3, 0.8],
            ],
            b: vec![
                vec![0.5, 0.0],
                vec![0.0, 0.5],
                vec![0.3, -0.3],
                vec![0.2, 0.4],
            ],
            noise: 0.0,
        }
    }
}

impl LinearDynamics {
    pub fn validate(&self) -> Result<(usize, usize)> {
        let n = self.a.len();
        if n == 0 || self.a.iter().any(|r| r.len() != n) {
            return Err(Error::Config("linsys A must be square and nonempty".into()));
        }
        if self.b.len() != n {
            return Err(Error::Config("linsys B must have one row per state".into()));
        }
        let m = self.b[0].len();
        if m == 0 || self.b.iter().any(|r| r.len() != m) {
            return Err(Error::Config("linsys B rows must share a nonzero width".into()));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Config("linsys noise must be finite and nonnegative".into()));
        }
        Ok((n, m))
    }

    /// `A s + B a` without noise.
    pub fn apply(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(ar, br)| {
                ar.iter().zip(s).map(|(x, y)| x * y).sum::<f64>()
                    + br.iter().zip(a).map(|(x, y)| x * y).sum::<f64>()
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LinearSystem {
    spec: EnvSpec,
    pub dynamics: LinearDynamics,
    pub state: Vec<f64>,
    rng: ChaCha8Rng,
    ep: Episode,
}

impl LinearSystem {
    pub fn new(dynamics: LinearDynamics) -> Result<Self> {
        let (n, m) = dynamics.validate()?;
        Ok(Self {
            spec: EnvSpec {
                name: "linsys".into(),
                state_dim: n,
                action_dim: m,
                action_low: vec![-1.0; m],
                action_high: vec![1.0; m],
                max_episode_steps: 100,
            },
            dynamics,
            state: vec![0.0; n],
            rng: ChaCha8Rng::seed_from_u64(0),
            ep: Episode::default(),
        })
    }
}

impl Environment for LinearSystem {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = (0..self.spec.state_dim)
            .map(|_| self.rng.sample(StandardNormal))
            .collect();
        self.ep.begin();
        self.state.clone()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        self.ep.check()?;
        let a = self.ep.clip(&self.spec, action)?;
        let reward = -self.state.iter().map(|x| x * x).sum::<f64>();
        let mut next = self.dynamics.apply(&self.state, &a);
        if self.dynamics.noise > 0.0 {
            for v in &mut next {
                let xi: f64 = self.rng.sample(StandardNormal);
                *v += self.dynamics.noise * xi;
            }
        }
        self.state = next;
        let truncated = self.ep.advance(&self.spec);
        Ok(Step {
            state: self.state.clone(),
            reward,
            terminal: false,
            truncated,
        })
    }

    fn clipped_actions(&self) -> u64 {
        self.ep.clipped
    }
}

/// Builds an environment by config name.
pub fn make_env(name: &str, dynamics: Option<&LinearDynamics>) -> Result<Box<dyn Environment>> {
    match name {
        "pendulum" => Ok(Box::new(Pendulum::new())),
        "pointmass" => Ok(Box::new(PointMass::new())),
        "linsys" => Ok(Box::new(LinearSystem::new(
            dynamics.cloned().unwrap_or_default(),
        )?)),
        other => Err(Error::Config(format!("unknown environment {other:?}"))),
    }
}
