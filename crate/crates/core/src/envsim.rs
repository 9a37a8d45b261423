//! Continuous-control environments with adjustable physics.
//!
//! Two envs share one interface: a 2-D point mass under gravity and linear
//! drag, and a torque-driven pendulum. A source domain is the same env with
//! its [`PhysicsKnobs`] scaled; the target is the canonical env (all knobs
//! 1.0). Episodes end only at the horizon.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub mod pointmass {
    pub const MAX_FORCE: f64 = 10.0;
    pub const GRAVITY: f64 = 9.8;
    pub const DRAG: f64 = 0.5;
    pub const MASS: f64 = 1.0;
    pub const ARENA: f64 = 5.0;
    pub const MAX_SPEED: f64 = 10.0;
    pub const RESET_SPAN: f64 = 4.0;
}

pub mod pendulum {
    pub const GRAVITY: f64 = 10.0;
    pub const LENGTH: f64 = 1.0;
    pub const MASS: f64 = 1.0;
    pub const DAMPING: f64 = 0.1;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;
    pub const SUBSTEPS: usize = 5;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Pointmass,
    Pendulum,
}

impl std::str::FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointmass" => Ok(EnvId::Pointmass),
            "pendulum" => Ok(EnvId::Pendulum),
            other => Err(Error::InvalidArgument(format!("unknown env id `{other}`"))),
        }
    }
}

/// Multipliers on the canonical physical constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsKnobs {
    pub gravity_scale: f64,
    pub friction_scale: f64,
    pub mass_scale: f64,
}

impl PhysicsKnobs {
    pub const CANONICAL: PhysicsKnobs = PhysicsKnobs {
        gravity_scale: 1.0,
        friction_scale: 1.0,
        mass_scale: 1.0,
    };

    pub fn is_canonical(&self) -> bool {
        *self == Self::CANONICAL
    }

    pub fn validate(&self) -> Result<()> {
        // gravity and friction may be switched off entirely; mass may not.
        let ok = self.gravity_scale.is_finite()
            && self.gravity_scale >= 0.0
            && self.friction_scale.is_finite()
            && self.friction_scale >= 0.0
            && self.mass_scale.is_finite()
            && self.mass_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid physics knobs {self:?}")))
        }
    }
}

impl Default for PhysicsKnobs {
    fn default() -> Self {
        Self::CANONICAL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: EnvId,
    pub knobs: PhysicsKnobs,
    pub dt: f64,
    pub horizon: usize,
    /// Point-mass goal position; unused by the pendulum.
    pub goal: [f64; 2],
    /// Adds the `0.001·a²` pendulum penalty. This makes the reward depend on
    /// the action, so a reward model over `(s, s')` can no longer fit it.
    #[serde(default)]
    pub action_penalty: bool,
}

impl EnvSpec {
    pub fn pointmass(knobs: PhysicsKnobs) -> Self {
        Self {
            id: EnvId::Pointmass,
            knobs,
            dt: 0.05,
            horizon: 200,
            goal: [0.0, 0.0],
            action_penalty: false,
        }
    }

    pub fn pendulum(knobs: PhysicsKnobs) -> Self {
        Self {
            id: EnvId::Pendulum,
            knobs,
            dt: 0.05,
            horizon: 200,
            goal: [0.0, 0.0],
            action_penalty: false,
        }
    }

    pub fn new(id: EnvId, knobs: PhysicsKnobs) -> Self {
        match id {
            EnvId::Pointmass => Self::pointmass(knobs),
            EnvId::Pendulum => Self::pendulum(knobs),
        }
    }

    pub fn with_knobs(&self, knobs: PhysicsKnobs) -> Self {
        Self {
            knobs,
            ..self.clone()
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.id {
            EnvId::Pointmass => 4,
            EnvId::Pendulum => 3,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.id {
            EnvId::Pointmass => 2,
            EnvId::Pendulum => 1,
        }
    }

    /// Number of unit draws consumed by a reset.
    pub fn reset_draws(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        self.knobs.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        Ok(())
    }

    /// Initial observation from unit draws in [0, 1).
    pub fn reset_from_unit(&self, draws: &[f64]) -> Vec<f64> {
        match self.id {
            EnvId::Pointmass => {
                let span = pointmass::RESET_SPAN;
                vec![
                    -span + 2.0 * span * draws[0],
                    -span + 2.0 * span * draws[1],
                    0.0,
                    0.0,
                ]
            }
            EnvId::Pendulum => {
                let theta = -PI + 2.0 * PI * draws[0];
                let omega = -1.0 + 2.0 * draws[1];
                vec![theta.cos(), theta.sin(), omega]
            }
        }
    }

    /// The reward of a transition. Depends on `(s, s')` only unless the
    /// pendulum action penalty is enabled.
    pub fn reward(&self, _s: &[f64], s_next: &[f64], action: &[f64]) -> f64 {
        match self.id {
            EnvId::Pointmass => {
                let dx = s_next[0] - self.goal[0];
                let dy = s_next[1] - self.goal[1];
                -(dx * dx + dy * dy).sqrt()
            }
            EnvId::Pendulum => {
                let theta = s_next[1].atan2(s_next[0]);
                let omega = s_next[2];
                let mut cost = theta * theta + 0.1 * omega * omega;
                if self.action_penalty {
                    let u = action[0].clamp(-1.0, 1.0) * pendulum::MAX_TORQUE;
                    cost += 0.001 * u * u;
                }
                -cost
            }
        }
    }

    /// Project an arbitrary observation onto the valid state set: clip the
    /// point mass to its arena and speed limits, renormalize the pendulum
    /// angle encoding.
    pub fn project(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.state_dim() {
            return Err(Error::dim("env state", self.state_dim(), obs.len()));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("env_set_state"));
        }
        Ok(match self.id {
            EnvId::Pointmass => {
                let a = pointmass::ARENA;
                let v = pointmass::MAX_SPEED;
                vec![
                    obs[0].clamp(-a, a),
                    obs[1].clamp(-a, a),
                    obs[2].clamp(-v, v),
                    obs[3].clamp(-v, v),
                ]
            }
            EnvId::Pendulum => {
                let theta = obs[1].atan2(obs[0]);
                let w = pendulum::MAX_SPEED;
                vec![theta.cos(), theta.sin(), obs[2].clamp(-w, w)]
            }
        })
    }

    fn dynamics(&self, obs: &[f64], action: &[f64]) -> Vec<f64> {
        let k = &self.knobs;
        match self.id {
            EnvId::Pointmass => {
                use pointmass::*;
                let dt = self.dt;
                let inv_m = 1.0 / (MASS * k.mass_scale);
                let drag = DRAG * k.friction_scale;
                let ax = MAX_FORCE * action[0] * inv_m - drag * obs[2];
                let ay = MAX_FORCE * action[1] * inv_m - GRAVITY * k.gravity_scale - drag * obs[3];
                let vx = (obs[2] + dt * ax).clamp(-MAX_SPEED, MAX_SPEED);
                let vy = (obs[3] + dt * ay).clamp(-MAX_SPEED, MAX_SPEED);
                let x = (obs[0] + dt * vx).clamp(-ARENA, ARENA);
                let y = (obs[1] + dt * vy).clamp(-ARENA, ARENA);
                vec![x, y, vx, vy]
            }
            EnvId::Pendulum => {
                use pendulum::*;
                // θ = 0 is upright; θ̈ = 3g/(2l)·sin θ + 3u/(m l²) − b·θ̇.
                let g = GRAVITY * k.gravity_scale;
                let m = MASS * k.mass_scale;
                let b = DAMPING * k.friction_scale;
                let u = MAX_TORQUE * action[0];
                let accel = |theta: f64, omega: f64| {
                    3.0 * g / (2.0 * LENGTH) * theta.sin() + 3.0 * u / (m * LENGTH * LENGTH)
                        - b * omega
                };
                let mut theta = obs[1].atan2(obs[0]);
                let mut omega = obs[2];
                let h = self.dt / SUBSTEPS as f64;
                for _ in 0..SUBSTEPS {
                    let half = omega + 0.5 * h * accel(theta, omega);
                    theta += h * half;
                    omega = half + 0.5 * h * accel(theta, half);
                }
                let omega = omega.clamp(-MAX_SPEED, MAX_SPEED);
                vec![theta.cos(), theta.sin(), omega]
            }
        }
    }

    /// Mechanical energy of a pendulum observation (zero friction, no torque
    /// conserves it).
    pub fn pendulum_energy(&self, obs: &[f64]) -> f64 {
        use pendulum::*;
        let g = GRAVITY * self.knobs.gravity_scale;
        let m = MASS * self.knobs.mass_scale;
        m * LENGTH * LENGTH / 6.0 * obs[2] * obs[2] + m * g * LENGTH / 2.0 * obs[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub obs: Vec<f64>,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// A running environment instance.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    state: EnvState,
    clipped_actions: usize,
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let obs = spec.reset_from_unit(&[0.5, 0.5]);
        Ok(Self {
            spec,
            state: EnvState { obs, step: 0 },
            clipped_actions: 0,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Count of actions that arrived outside [−1, 1] and were clipped.
    pub fn clipped_actions(&self) -> usize {
        self.clipped_actions
    }

    pub fn reset(&mut self, rng: &mut Rng) -> &EnvState {
        let draws: Vec<f64> = (0..self.spec.reset_draws()).map(|_| rng.unit()).collect();
        self.state = EnvState {
            obs: self.spec.reset_from_unit(&draws),
            step: 0,
        };
        &self.state
    }

    /// Continue from `obs` (projected onto the valid state set). The step
    /// counter is kept.
    pub fn set_state(&mut self, obs: &[f64]) -> Result<()> {
        self.state.obs = self.spec.project(obs)?;
        Ok(())
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != self.spec.action_dim() {
            return Err(Error::dim("env action", self.spec.action_dim(), action.len()));
        }
        let mut a = action.to_vec();
        for v in &mut a {
            if v.is_nan() {
                return Err(Error::non_finite(format!("action at step {}", self.state.step)));
            }
            if *v < -1.0 || *v > 1.0 {
                self.clipped_actions += 1;
                *v = v.clamp(-1.0, 1.0);
            }
        }
        let next = self.spec.dynamics(&self.state.obs, &a);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("env state at step {}", self.state.step)));
        }
        let reward = self.spec.reward(&self.state.obs, &next, &a);
        self.state.step += 1;
        self.state.obs = next.clone();
        Ok(StepOutcome {
            next,
            reward,
            done: self.state.step >= self.spec.horizon,
        })
    }
}

/// Anything that maps an observation to an action in [−1, 1]^A.
pub trait Policy {
    fn act(&self, obs: &[f64], rng: &mut Rng) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct RandomPolicy {
    pub action_dim: usize,
}

impl Policy for RandomPolicy {
    fn act(&self, _obs: &[f64], rng: &mut Rng) -> Vec<f64> {
        (0..self.action_dim).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy {
    pub action_dim: usize,
}

impl Policy for ZeroPolicy {
    fn act(&self, _obs: &[f64], _rng: &mut Rng) -> Vec<f64> {
        vec![0.0; self.action_dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_force() -> EnvSpec {
        EnvSpec::pointmass(PhysicsKnobs {
            gravity_scale: 0.0,
            friction_scale: 1.0,
            mass_scale: 1.0,
        })
    }

    #[test]
    fn midpoint_draws_reset_to_origin() {
        let spec = EnvSpec::pointmass(PhysicsKnobs::CANONICAL);
        assert_eq!(spec.reset_from_unit(&[0.5, 0.5]), vec![0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn reset_is_seed_deterministic() {
        let spec = EnvSpec::pointmass(PhysicsKnobs::CANONICAL);
        let mut a = Env::new(spec.clone()).unwrap();
        let mut b = Env::new(spec).unwrap();
        assert_eq!(
            a.reset(&mut Rng::seed_from(3)).obs,
            b.reset(&mut Rng::seed_from(3)).obs
        );
    }

    #[test]
    fn reset_positions_centered() {
        let mut env = Env::new(EnvSpec::pointmass(PhysicsKnobs::CANONICAL)).unwrap();
        let mut rng = Rng::seed_from(17);
        let n = 10_000;
        let (mut mx, mut my) = (0.0, 0.0);
        for _ in 0..n {
            let s = &env.reset(&mut rng).obs;
            assert!(s[0].abs() <= 4.0 && s[1].abs() <= 4.0);
            assert_eq!((s[2], s[3]), (0.0, 0.0));
            mx += s[0];
            my += s[1];
        }
        assert!((mx / n as f64).abs() < 0.1 && (my / n as f64).abs() < 0.1);
    }

    #[test]
    fn zero_force_fixed_point() {
        let spec = zero_force();
        let mut env = Env::new(spec.clone()).unwrap();
        env.set_state(&[1.0, 1.0, 0.0, 0.0]).unwrap();
        let out = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(out.next, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(out.reward, -(2.0f64).sqrt());
    }

    #[test]
    fn gravity_step_by_hand() {
        let mut env = Env::new(EnvSpec::pointmass(PhysicsKnobs::CANONICAL)).unwrap();
        env.set_state(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        let out = env.step(&[0.0, 0.0]).unwrap();
        assert!((out.next[3] + 0.49).abs() < 1e-12);
        assert!((out.next[1] + 0.05 * 0.49).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_actions_clipped_and_counted() {
        let mut env = Env::new(zero_force()).unwrap();
        env.set_state(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        let big = env.step(&[3.0, 0.0]).unwrap();
        let mut env2 = Env::new(zero_force()).unwrap();
        env2.set_state(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        let unit = env2.step(&[1.0, 0.0]).unwrap();
        assert_eq!(big.next, unit.next);
        assert_eq!(env.clipped_actions(), 1);
        assert_eq!(env2.clipped_actions(), 0);
    }

    #[test]
    fn set_state_clips_and_steps_deterministically() {
        let mut env = Env::new(EnvSpec::pointmass(PhysicsKnobs::CANONICAL)).unwrap();
        env.set_state(&[9.0, 9.0, 0.0, -20.0]).unwrap();
        assert_eq!(env.state().obs, vec![5.0, 5.0, 0.0, -10.0]);
        let mut twin = env.clone();
        assert_eq!(env.step(&[0.3, -0.2]).unwrap(), twin.step(&[0.3, -0.2]).unwrap());
        assert!(env.set_state(&[f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn horizon_sets_done() {
        let mut spec = zero_force();
        spec.horizon = 3;
        let mut env = Env::new(spec).unwrap();
        let dones: Vec<bool> = (0..3).map(|_| env.step(&[0.0, 0.0]).unwrap().done).collect();
        assert_eq!(dones, vec![false, false, true]);
    }

    #[test]
    fn pendulum_upright_rest_has_zero_reward() {
        let mut env = Env::new(EnvSpec::pendulum(PhysicsKnobs::CANONICAL)).unwrap();
        env.set_state(&[1.0, 0.0, 0.0]).unwrap();
        let out = env.step(&[0.0]).unwrap();
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.next, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn pendulum_encoding_stays_on_circle() {
        let mut env = Env::new(EnvSpec::pendulum(PhysicsKnobs::CANONICAL)).unwrap();
        let mut rng = Rng::seed_from(9);
        env.reset(&mut rng);
        env.set_state(&[2.0, 1.0, 0.5]).unwrap();
        for _ in 0..200 {
            let a = [rng.uniform(-1.0, 1.0)];
            let out = env.step(&a).unwrap();
            let r = out.next[0].powi(2) + out.next[1].powi(2);
            assert!((r - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pendulum_energy_conserved_without_friction() {
        let spec = EnvSpec::pendulum(PhysicsKnobs {
            friction_scale: 0.0,
            ..PhysicsKnobs::CANONICAL
        });
        let scale = pendulum::MASS * pendulum::GRAVITY * pendulum::LENGTH;
        let mut rng = Rng::seed_from(21);
        for _ in 0..10 {
            let mut env = Env::new(spec.clone()).unwrap();
            env.reset(&mut rng);
            let e0 = spec.pendulum_energy(&env.state().obs);
            for _ in 0..spec.horizon {
                let out = env.step(&[0.0]).unwrap();
                let e = spec.pendulum_energy(&out.next);
                assert!((e - e0).abs() < 0.01 * scale, "drift {}", (e - e0).abs() / scale);
            }
        }
    }

    #[test]
    fn knob_identity_matches_canonical_bitwise() {
        let explicit = EnvSpec::pointmass(PhysicsKnobs {
            gravity_scale: 1.0,
            friction_scale: 1.0,
            mass_scale: 1.0,
        });
        let canonical = EnvSpec::pointmass(PhysicsKnobs::default());
        let mut a = Env::new(explicit).unwrap();
        let mut b = Env::new(canonical).unwrap();
        let mut rng = Rng::seed_from(2);
        a.reset(&mut rng.clone());
        b.reset(&mut rng.clone());
        for _ in 0..50 {
            let act = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
            let (x, y) = (a.step(&act).unwrap(), b.step(&act).unwrap());
            assert_eq!(x, y);
        }
    }

    #[test]
    fn reward_recomputable_from_logged_pairs() {
        for spec in [
            EnvSpec::pointmass(PhysicsKnobs::CANONICAL),
            EnvSpec::pendulum(PhysicsKnobs::CANONICAL),
        ] {
            let mut env = Env::new(spec.clone()).unwrap();
            let mut rng = Rng::seed_from(5);
            env.reset(&mut rng);
            for _ in 0..100 {
                let s = env.state().obs.clone();
                let act: Vec<f64> = (0..spec.action_dim()).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let out = env.step(&act).unwrap();
                let zero = vec![0.0; spec.action_dim()];
                assert_eq!(spec.reward(&s, &out.next, &zero), out.reward);
            }
        }
    }
}
