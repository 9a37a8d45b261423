//! Soft actor-critic over the modulated replay buffer, behaviour-cloning
//! pretraining on target demos, and the online BDGxRL loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bridge::Bridge;
use crate::container::Container;
use crate::datasets::{BufferRecord, Batch, Dataset, Provenance, ReplayBuffer, Transition, TransitionLayout};
use crate::envsim::{Env, EnvSpec, Policy, RandomPolicy};
use crate::error::{Error, Result};
use crate::reward::{RewardConfig, RewardModel};
use crate::rng::Rng;
use crate::stats;
use crate::tensornet::{Activation, Adam, AdamConfig, ForwardCache, Gradients, Mlp, Tensor};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Demo actions are scaled by this before `atanh`.
pub const ACTION_SHRINK: f64 = 1.0 - 1e-6;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 − tanh²u)` without cancellation for large `|u|`.
pub fn log1m_tanh2(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Tanh-squashed diagonal Gaussian policy. The net maps a state to
/// `[mean; log_std]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
}

/// Per-row head outputs with the log-std clamp applied.
#[derive(Debug, Clone)]
pub struct PolicyHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    clamped: Vec<bool>,
    cache: ForwardCache,
}

/// A reparameterized sample `a = tanh(mean + std·ζ)`.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub head: PolicyHead,
    pub zeta: Vec<f64>,
    pub u: Vec<f64>,
    pub action: Tensor,
    pub log_prob: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut sizes = vec![state_dim];
        sizes.extend(hidden);
        sizes.push(2 * action_dim);
        Ok(Self {
            net: Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng)?,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    pub fn head(&self, s: &Tensor) -> Result<PolicyHead> {
        if s.cols() != self.state_dim() {
            return Err(Error::dim("policy state", self.state_dim(), s.cols()));
        }
        let cache = self.net.forward_cached(s)?;
        let ad = self.action_dim();
        let out = cache.output();
        let mut mean = Vec::with_capacity(s.rows() * ad);
        let mut log_std = Vec::with_capacity(s.rows() * ad);
        let mut clamped = Vec::with_capacity(s.rows() * ad);
        for r in 0..s.rows() {
            let row = out.row(r);
            mean.extend_from_slice(&row[..ad]);
            for &l in &row[ad..] {
                clamped.push(!(LOG_STD_MIN..=LOG_STD_MAX).contains(&l));
                log_std.push(l.clamp(LOG_STD_MIN, LOG_STD_MAX));
            }
        }
        Ok(PolicyHead {
            mean,
            log_std,
            clamped,
            cache,
        })
    }

    pub fn mean_action(&self, s: &[f64]) -> Result<Vec<f64>> {
        let head = self.head(&Tensor::new(vec![1, s.len()], s.to_vec())?)?;
        Ok(head.mean.iter().map(|m| m.tanh()).collect())
    }

    pub fn mean_actions(&self, s: &Tensor) -> Result<Tensor> {
        let head = self.head(s)?;
        Tensor::new(vec![s.rows(), self.action_dim()], head.mean.iter().map(|m| m.tanh()).collect())
    }

    pub fn sample(&self, s: &Tensor, rng: &mut Rng) -> Result<PolicySample> {
        let head = self.head(s)?;
        let n = head.mean.len();
        let ad = self.action_dim();
        let mut zeta = vec![0.0; n];
        rng.fill_normal(&mut zeta);
        let mut u = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut log_prob = vec![0.0; s.rows()];
        for i in 0..n {
            let uu = head.mean[i] + head.log_std[i].exp() * zeta[i];
            u.push(uu);
            a.push(uu.tanh());
            log_prob[i / ad] += -0.5 * zeta[i] * zeta[i] - head.log_std[i] - HALF_LN_2PI - log1m_tanh2(uu);
        }
        Ok(PolicySample {
            head,
            zeta,
            u,
            action: Tensor::new(vec![s.rows(), ad], a)?,
            log_prob,
        })
    }

    pub fn sample_action(&self, s: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let t = Tensor::new(vec![1, s.len()], s.to_vec())?;
        Ok(self.sample(&t, rng)?.action.into_data())
    }

    /// Per-row `log π(a|s)` for actions in `[−1, 1]`, after the shrink.
    pub fn log_prob(&self, s: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        let (nll, _) = self.nll_and_grad(s, a, 1.0)?;
        Ok(nll.iter().map(|v| -v).collect())
    }

    /// Mean negative log-likelihood of `a` and its parameter gradients.
    pub fn nll_gradients(&self, s: &Tensor, a: &Tensor) -> Result<(f64, Gradients)> {
        let (nll, (head, grad)) = self.nll_and_grad(s, a, 1.0)?;
        Ok((stats::mean(&nll), self.net.backward(&head.cache, &grad)?))
    }

    /// Per-row negative log-likelihood of `a`, and the gradient of
    /// `scale · mean_rows(nll)` w.r.t. the net output.
    pub(crate) fn nll_and_grad(&self, s: &Tensor, a: &Tensor, scale: f64) -> Result<(Vec<f64>, (PolicyHead, Tensor))> {
        let ad = self.action_dim();
        if a.cols() != ad || a.rows() != s.rows() {
            return Err(Error::Shape {
                context: "policy log-likelihood actions".into(),
                expected: vec![s.rows(), ad],
                got: a.shape().to_vec(),
            });
        }
        if let Some(v) = a.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("demo action {v} outside [-1, 1]")));
        }
        let head = self.head(s)?;
        let n = s.rows();
        let mut nll = vec![0.0; n];
        let mut grad = Tensor::zeros(&[n, 2 * ad]);
        for i in 0..n * ad {
            let (r, d) = (i / ad, i % ad);
            let x = a.data()[i] * ACTION_SHRINK;
            let u = x.atanh();
            let sigma = head.log_std[i].exp();
            let z = (u - head.mean[i]) / sigma;
            nll[r] += 0.5 * z * z + head.log_std[i] + HALF_LN_2PI + (1.0 - x * x).ln();
            let g = grad.row_mut(r);
            g[d] = -scale * z / sigma / n as f64;
            g[ad + d] = if head.clamped[i] { 0.0 } else { scale * (1.0 - z * z) / n as f64 };
        }
        Ok((nll, (head, grad)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new("policy", serde_json::json!({}));
        c.push_mlp("net", &self.net);
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind("policy")?;
        Ok(Self { net: c.read_mlp("net")? })
    }

    pub fn deterministic(&self) -> DeterministicPolicy<'_> {
        DeterministicPolicy(self)
    }
}

impl Policy for GaussianPolicy {
    fn act(&self, obs: &[f64], rng: &mut Rng) -> Vec<f64> {
        self.sample_action(obs, rng).expect("observation width matches the policy")
    }
}

/// Acts with `tanh(mean)`.
#[derive(Debug, Clone, Copy)]
pub struct DeterministicPolicy<'a>(pub &'a GaussianPolicy);

impl Policy for DeterministicPolicy<'_> {
    fn act(&self, obs: &[f64], _rng: &mut Rng) -> Vec<f64> {
        self.0.mean_action(obs).expect("observation width matches the policy")
    }
}

fn demo_batch(demos: &Dataset, n: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let layout = demos.layout();
    let mut s = Vec::with_capacity(n * layout.state_dim);
    let mut a = Vec::with_capacity(n * layout.action_dim);
    for _ in 0..n {
        let t = demos.get(rng.index(demos.len()));
        s.extend_from_slice(&t.s);
        a.extend_from_slice(&t.a);
    }
    Ok((
        Tensor::new(vec![n, layout.state_dim], s)?,
        Tensor::new(vec![n, layout.action_dim], a)?,
    ))
}

fn check_demo_actions(demos: &Dataset) -> Result<()> {
    if demos.is_empty() {
        return Err(Error::Empty("demonstration dataset".into()));
    }
    for (i, t) in demos.transitions().iter().enumerate() {
        if let Some(v) = t.a.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("demo {i} has action {v} outside [-1, 1]")));
        }
    }
    Ok(())
}

/// Behaviour cloning: minimize the mean negative log-likelihood of demo
/// actions under the squashed Gaussian. Returns the loss trace.
pub fn bc_pretrain(
    policy: &mut GaussianPolicy,
    demos: &Dataset,
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_demo_actions(demos)?;
    let mut opt = Adam::new(AdamConfig::with_lr(lr), &policy.net.params());
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let (s, a) = demo_batch(demos, batch, rng)?;
        let (loss, grads) = policy.nll_gradients(&s, &a)?;
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("behaviour cloning loss at step {step}")));
        }
        opt.apply(&mut policy.net.params_mut(), &grads.params)?;
        trace.push(loss);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateContinuation {
    /// Continue the source simulator from the translated next state.
    Translated,
    /// Keep the simulator's own next state.
    SourceTrue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub temperature_lr: f64,
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub auto_temperature: bool,
    pub initial_temperature: f64,
    /// Defaults to `−dim(A)`.
    pub target_entropy: Option<f64>,
    /// Weight α of the imitation term.
    pub imitation_weight: f64,
    pub bc_pretrain_steps: usize,
    pub bc_lr: f64,
    pub state_continuation: StateContinuation,
    pub refresh_period: usize,
    /// Uniform-random exploration steps, used only when no BC pretraining ran.
    pub random_start_steps: usize,
    pub updates_per_step: usize,
    pub buffer_capacity: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub eval_seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            temperature_lr: 3e-4,
            batch: 256,
            hidden: vec![256, 256],
            auto_temperature: true,
            initial_temperature: 1.0,
            target_entropy: None,
            imitation_weight: 0.1,
            bc_pretrain_steps: 5000,
            bc_lr: 1e-3,
            state_continuation: StateContinuation::Translated,
            refresh_period: 10_000,
            random_start_steps: 1000,
            updates_per_step: 1,
            buffer_capacity: 100_000,
            eval_interval: 5000,
            eval_episodes: 5,
            eval_seed: 0x5eed,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("agent config: {m}")));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.imitation_weight >= 0.0) {
            return bad("imitation_weight must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.batch == 0 || self.eval_episodes == 0 || self.eval_interval == 0 || self.buffer_capacity == 0 {
            return bad("batch, eval_episodes, eval_interval and buffer_capacity must be >= 1");
        }
        if !(self.initial_temperature >= 0.0) {
            return bad("initial_temperature must be >= 0");
        }
        if self.auto_temperature && self.initial_temperature <= 0.0 {
            return bad("auto temperature needs initial_temperature > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub entropy: f64,
    /// The `α·L_IL` term added to the actor loss.
    pub il_loss: f64,
    pub temperature: f64,
}

/// Twin-critic SAC agent with slow target critics.
#[derive(Debug, Clone)]
pub struct Sac {
    pub config: AgentConfig,
    pub policy: GaussianPolicy,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    log_temperature: f64,
    policy_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    temperature_opt: Adam,
    updates: usize,
}

fn critic_input(s: &Tensor, a: &Tensor) -> Result<Tensor> {
    Tensor::hcat(&[s, a])
}

impl Sac {
    pub fn new(state_dim: usize, action_dim: usize, config: AgentConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let policy = GaussianPolicy::new(state_dim, action_dim, &config.hidden, rng)?;
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend(&config.hidden);
        sizes.push(1);
        let q1 = Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng)?;
        let q2 = Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng)?;
        Ok(Self::from_parts(config, policy, q1, q2))
    }

    fn from_parts(config: AgentConfig, policy: GaussianPolicy, q1: Mlp, q2: Mlp) -> Self {
        let log_temperature = config.initial_temperature.max(f64::MIN_POSITIVE).ln();
        let temp_param = Tensor::new(vec![1], vec![log_temperature]).expect("scalar");
        Self {
            policy_opt: Adam::new(AdamConfig::with_lr(config.actor_lr), &policy.net.params()),
            q1_opt: Adam::new(AdamConfig::with_lr(config.critic_lr), &q1.params()),
            q2_opt: Adam::new(AdamConfig::with_lr(config.critic_lr), &q2.params()),
            temperature_opt: Adam::new(AdamConfig::with_lr(config.temperature_lr), &[&temp_param]),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            log_temperature,
            config,
            updates: 0,
        }
    }

    pub fn temperature(&self) -> f64 {
        if self.config.auto_temperature {
            self.log_temperature.exp()
        } else {
            self.config.initial_temperature
        }
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn target_entropy(&self) -> f64 {
        self.config
            .target_entropy
            .unwrap_or(-(self.policy.action_dim() as f64))
    }

    /// `min(Q₁, Q₂)` of the online critics.
    pub fn min_q(&self, s: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        let x = critic_input(s, a)?;
        let q1 = self.q1.forward(&x)?;
        let q2 = self.q2.forward(&x)?;
        Ok(q1.data().iter().zip(q2.data()).map(|(a, b)| a.min(*b)).collect())
    }

    /// Bellman targets `r + γ(1 − done)(min Q_targ(s', a') − temp·log π(a'|s'))`
    /// with `a' ~ π(·|s')`.
    pub fn critic_targets(&self, batch: &Batch, rng: &mut Rng) -> Result<Vec<f64>> {
        let gamma = self.config.gamma;
        if gamma == 0.0 {
            return Ok(batch.r.clone());
        }
        let next = self.policy.sample(&batch.s_next, rng)?;
        let x = critic_input(&batch.s_next, &next.action)?;
        let t1 = self.q1_target.forward(&x)?;
        let t2 = self.q2_target.forward(&x)?;
        let temp = self.temperature();
        Ok((0..batch.len())
            .map(|i| {
                let soft = t1.data()[i].min(t2.data()[i]) - temp * next.log_prob[i];
                batch.r[i] + gamma * (1.0 - batch.done[i]) * soft
            })
            .collect())
    }

    /// `mean(temp·log π(a|s) − min Q(s, a))` with `a` reparameterized, and
    /// its gradient w.r.t. the policy parameters.
    pub fn actor_loss_and_grad(&self, s: &Tensor, temp: f64, rng: &mut Rng) -> Result<(f64, Gradients, Vec<f64>)> {
        let n = s.rows();
        let ad = self.policy.action_dim();
        let sd = self.policy.state_dim();
        let sample = self.policy.sample(s, rng)?;
        let xa = critic_input(s, &sample.action)?;
        let c1 = self.q1.forward_cached(&xa)?;
        let c2 = self.q2.forward_cached(&xa)?;
        let mut up1 = Tensor::zeros(&[n, 1]);
        let mut up2 = Tensor::zeros(&[n, 1]);
        let mut actor_loss = 0.0;
        for i in 0..n {
            let (a, b) = (c1.output().data()[i], c2.output().data()[i]);
            if a <= b {
                up1.data_mut()[i] = 1.0;
            } else {
                up2.data_mut()[i] = 1.0;
            }
            actor_loss += temp * sample.log_prob[i] - a.min(b);
        }
        actor_loss /= n as f64;
        let dq1 = self.q1.backward(&c1, &up1)?.input;
        let dq2 = self.q2.backward(&c2, &up2)?.input;
        let mut head_grad = Tensor::zeros(&[n, 2 * ad]);
        for i in 0..n * ad {
            let (r, d) = (i / ad, i % ad);
            let dq_da = dq1.row(r)[sd + d] + dq2.row(r)[sd + d];
            let a = sample.action.data()[i];
            let (t, sigma, z) = (sample.u[i].tanh(), sample.head.log_std[i].exp(), sample.zeta[i]);
            let dl_da = -dq_da / n as f64;
            let dl_dlogp = temp / n as f64;
            let jac = 1.0 - a * a;
            let g = head_grad.row_mut(r);
            g[d] = dl_da * jac + dl_dlogp * 2.0 * t;
            g[ad + d] = if sample.head.clamped[i] {
                0.0
            } else {
                dl_da * jac * sigma * z + dl_dlogp * (-1.0 + 2.0 * t * sigma * z)
            };
        }
        let grads = self.policy.net.backward(&sample.head.cache, &head_grad)?;
        Ok((actor_loss, grads, sample.log_prob))
    }

    /// One SAC step: critics, then the actor (plus `α·L_IL` on a demo
    /// minibatch when demos are given and α > 0), then the temperature and
    /// the Polyak target update.
    pub fn update(&mut self, batch: &Batch, demos: Option<&Dataset>, rng: &mut Rng) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(Error::Empty("SAC update on an empty batch".into()));
        }
        let n = batch.len();
        let y = self.critic_targets(batch, rng)?;
        let x = critic_input(&batch.s, &batch.a)?;
        let mut critic_loss = 0.0;
        for (net, opt) in [(&mut self.q1, &mut self.q1_opt), (&mut self.q2, &mut self.q2_opt)] {
            let cache = net.forward_cached(&x)?;
            let mut grad = Tensor::zeros(&[n, 1]);
            let mut loss = 0.0;
            for (i, g) in grad.data_mut().iter_mut().enumerate() {
                let d = cache.output().data()[i] - y[i];
                loss += d * d;
                *g = 2.0 * d / n as f64;
            }
            critic_loss += 0.5 * loss / n as f64;
            let grads = net.backward(&cache, &grad)?;
            opt.apply(&mut net.params_mut(), &grads.params)?;
        }

        let temp = self.temperature();
        let (actor_loss, mut grads, log_prob) = self.actor_loss_and_grad(&batch.s, temp, rng)?;

        let alpha = self.config.imitation_weight;
        let mut il_loss = 0.0;
        if let Some(demos) = demos.filter(|d| alpha > 0.0 && !d.is_empty()) {
            let (ds, da) = demo_batch(demos, n, rng)?;
            let (nll, (head, g)) = self.policy.nll_and_grad(&ds, &da, alpha)?;
            il_loss = alpha * stats::mean(&nll);
            grads.add_assign(&self.policy.net.backward(&head.cache, &g)?)?;
        }
        if !(critic_loss.is_finite() && actor_loss.is_finite() && il_loss.is_finite()) {
            return Err(Error::non_finite(format!(
                "SAC losses at update {} (critic {critic_loss}, actor {actor_loss}, il {il_loss})",
                self.updates
            )));
        }
        self.policy_opt.apply(&mut self.policy.net.params_mut(), &grads.params)?;

        let mean_logp = stats::mean(&log_prob);
        if self.config.auto_temperature {
            let g = -(mean_logp + self.target_entropy());
            let mut p = Tensor::new(vec![1], vec![self.log_temperature])?;
            self.temperature_opt.apply(&mut [&mut p], &[Tensor::new(vec![1], vec![g])?])?;
            self.log_temperature = p.data()[0];
        }
        self.q1_target.polyak_update(&self.q1, self.config.tau)?;
        self.q2_target.polyak_update(&self.q2, self.config.tau)?;
        self.updates += 1;
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            entropy: -mean_logp,
            il_loss,
            temperature: temp,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "log_temperature": self.log_temperature,
            "updates": self.updates,
        });
        let mut c = Container::new("sac", meta);
        c.push_mlp("policy", &self.policy.net);
        c.push_mlp("q1", &self.q1);
        c.push_mlp("q2", &self.q2);
        c.push_mlp("q1_target", &self.q1_target);
        c.push_mlp("q2_target", &self.q2_target);
        c.save(path)
    }

    /// Restores networks and temperature; optimizer moments start fresh.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind("sac")?;
        let config: AgentConfig = serde_json::from_value(c.meta["config"].clone())?;
        let policy = GaussianPolicy { net: c.read_mlp("policy")? };
        let mut sac = Self::from_parts(config, policy, c.read_mlp("q1")?, c.read_mlp("q2")?);
        sac.q1_target = c.read_mlp("q1_target")?;
        sac.q2_target = c.read_mlp("q2_target")?;
        sac.log_temperature = c.meta["log_temperature"].as_f64().unwrap_or(sac.log_temperature);
        sac.updates = c.meta["updates"].as_u64().unwrap_or(0) as usize;
        Ok(sac)
    }
}

pub fn sac_update(agent: &mut Sac, batch: &Batch, demos: Option<&Dataset>, rng: &mut Rng) -> Result<UpdateStats> {
    agent.update(batch, demos, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReturns {
    pub random: f64,
    pub expert: f64,
}

impl ReferenceReturns {
    /// `100·(R − R_random)/(R_expert − R_random)`.
    pub fn normalize(&self, ret: f64) -> Result<f64> {
        let span = self.expert - self.random;
        if !(span.abs() > 1e-12) || !span.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "degenerate reference returns (random {}, expert {})",
                self.random, self.expert
            )));
        }
        Ok(100.0 * (ret - self.random) / span)
    }
}

pub fn normalized_score(ret: f64, refs: Option<&ReferenceReturns>) -> Result<f64> {
    refs.ok_or_else(|| Error::InvalidArgument("missing reference returns".into()))?
        .normalize(ret)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub steps: usize,
}

/// Full-horizon episodes of `policy` in a fresh environment.
pub fn evaluate_policy(policy: &dyn Policy, spec: &EnvSpec, n_episodes: usize, rng: &mut Rng) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be >= 1".into()));
    }
    let mut env = Env::new(spec.clone())?;
    let mut returns = Vec::with_capacity(n_episodes);
    let mut steps = 0;
    for _ in 0..n_episodes {
        env.reset(rng);
        let mut total = 0.0;
        loop {
            let a = policy.act(&env.state().obs, rng);
            let out = env.step(&a)?;
            total += out.reward;
            steps += 1;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(EvalReport {
        mean: stats::mean(&returns),
        std: stats::std(&returns),
        returns,
        steps,
    })
}

/// Mean return of the uniform-random policy.
pub fn random_reference(spec: &EnvSpec, n_episodes: usize, seed: u64) -> Result<f64> {
    let policy = RandomPolicy {
        action_dim: spec.action_dim(),
    };
    Ok(evaluate_policy(&policy, spec, n_episodes, &mut Rng::seed_from(seed))?.mean)
}

/// Where buffer rewards come from.
#[derive(Debug, Clone)]
pub enum RewardSource {
    /// The source simulator's own reward.
    Raw,
    /// `R(s, s̃')` from a learned model.
    Model(RewardModel),
    /// The analytic reward function evaluated on `(s, s̃')`.
    Oracle,
}

#[derive(Debug, Clone)]
pub struct OnlineSetup {
    pub source: EnvSpec,
    pub target: EnvSpec,
    /// Target demos for pretraining and the imitation term.
    pub demos: Option<Dataset>,
    /// Source dataset, augmented with every true source transition.
    pub source_data: Dataset,
    /// `None` stores raw source next states.
    pub bridge: Option<Bridge>,
    pub reward: RewardSource,
    pub reward_config: RewardConfig,
    pub references: Option<ReferenceReturns>,
    /// Steps after which a copy of the policy is kept.
    pub snapshot_at: Vec<usize>,
}

impl OnlineSetup {
    /// Plain SAC in `spec`: no bridge, simulator rewards, no demos.
    pub fn plain(spec: EnvSpec, target: EnvSpec) -> Self {
        let layout = TransitionLayout::for_env(&spec);
        Self {
            source: spec,
            target,
            demos: None,
            source_data: Dataset::new(layout, true),
            bridge: None,
            reward: RewardSource::Raw,
            reward_config: RewardConfig::default(),
            references: None,
            snapshot_at: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub source_return: Option<f64>,
    pub modulated_return: Option<f64>,
    pub eval_return_target: f64,
    pub normalized_score: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub il_loss: Option<f64>,
    pub refresh_count: usize,
}

#[derive(Debug)]
pub struct OnlineResult {
    pub agent: Sac,
    pub metrics: Vec<MetricsRow>,
    pub refresh_count: usize,
    pub bc_trace: Vec<f64>,
    pub buffer: ReplayBuffer,
    pub snapshots: Vec<(usize, GaussianPolicy)>,
    pub setup: OnlineSetup,
}

fn mean_opt(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| stats::mean(xs))
}

/// The online phase: act in the source simulator, translate the next state,
/// modulate the reward, store the modulated transition, update SAC each
/// step, and refresh the bridge and reward model periodically on the
/// augmented source dataset.
pub fn run_bdgxrl(mut setup: OnlineSetup, cfg: &AgentConfig, total_steps: usize, rng: &mut Rng) -> Result<OnlineResult> {
    cfg.validate()?;
    let layout = TransitionLayout::for_env(&setup.source);
    if TransitionLayout::for_env(&setup.target) != layout {
        return Err(Error::InvalidArgument("source and target envs have different dims".into()));
    }
    if let Some(b) = &setup.bridge {
        if b.layout != layout {
            return Err(Error::NormalizerMismatch(format!(
                "bridge layout {:?} does not match env layout {layout:?}",
                b.layout
            )));
        }
    }
    let mut agent = Sac::new(layout.state_dim, layout.action_dim, cfg.clone(), rng)?;
    let demos = setup.demos.take();
    let mut bc_trace = Vec::new();
    if cfg.bc_pretrain_steps > 0 {
        if let Some(d) = &demos {
            bc_trace = bc_pretrain(&mut agent.policy, d, cfg.bc_pretrain_steps, cfg.batch, cfg.bc_lr, rng)?;
        }
    }
    let warmup = if bc_trace.is_empty() { cfg.random_start_steps } else { 0 };
    let random = RandomPolicy {
        action_dim: layout.action_dim,
    };

    let mut env = Env::new(setup.source.clone())?;
    let mut buffer = ReplayBuffer::new(layout, cfg.buffer_capacity)?;
    env.reset(rng);
    let mut refresh_count = 0;
    let mut metrics = Vec::new();
    let mut snapshots = Vec::new();
    let (mut ep_source, mut ep_modulated) = (0.0, 0.0);
    let (mut src_returns, mut mod_returns) = (Vec::new(), Vec::new());
    let (mut closs, mut aloss, mut iloss) = (Vec::new(), Vec::new(), Vec::new());

    for t in 0..total_steps {
        let s = env.state().obs.clone();
        let a = if t < warmup {
            random.act(&s, rng)
        } else {
            agent.policy.sample_action(&s, rng)?
        };
        let out = env.step(&a)?;
        setup.source_data.push(Transition {
            s: s.clone(),
            a: a.clone(),
            s_next: out.next.clone(),
            r: Some(out.reward),
            done: out.done,
        })?;
        let (s_tilde, next_from) = match &setup.bridge {
            Some(b) => {
                let raw = b.translate_s_to_t(&s, &a, &out.next, rng)?;
                (setup.source.project(&raw)?, Provenance::Modulated)
            }
            None => (out.next.clone(), Provenance::Source),
        };
        let (r_tilde, reward_from) = match &setup.reward {
            RewardSource::Raw => (out.reward, Provenance::Source),
            RewardSource::Model(m) => (m.predict(&s, &s_tilde)?, Provenance::Modulated),
            RewardSource::Oracle => (setup.source.reward(&s, &s_tilde, &a), Provenance::Oracle),
        };
        debug_assert!(setup.bridge.is_none() || next_from == Provenance::Modulated);
        debug_assert!(matches!(setup.reward, RewardSource::Raw) || reward_from != Provenance::Source);
        buffer.push(BufferRecord {
            s,
            a,
            r: r_tilde,
            s_next: s_tilde.clone(),
            // Episodes end only by the time limit, which is not a terminal.
            done: false,
            reward_from,
            next_from,
        })?;
        ep_source += out.reward;
        ep_modulated += r_tilde;
        if out.done {
            src_returns.push(ep_source);
            mod_returns.push(ep_modulated);
            ep_source = 0.0;
            ep_modulated = 0.0;
            env.reset(rng);
        } else if setup.bridge.is_some() && cfg.state_continuation == StateContinuation::Translated {
            env.set_state(&s_tilde)?;
        }

        if buffer.len() >= cfg.batch && t >= warmup {
            for _ in 0..cfg.updates_per_step {
                let batch = buffer.sample(cfg.batch, rng)?;
                let st = agent.update(&batch, demos.as_ref(), rng)?;
                closs.push(st.critic_loss);
                aloss.push(st.actor_loss);
                iloss.push(st.il_loss);
            }
        }

        let done_steps = t + 1;
        if done_steps % cfg.refresh_period == 0 && done_steps < total_steps {
            let mut refreshed = false;
            if let Some(b) = setup.bridge.as_mut() {
                if let Some(d) = &demos {
                    b.refresh(&setup.source_data, d, rng)?;
                    refreshed = true;
                }
            }
            if let RewardSource::Model(m) = &mut setup.reward {
                let steps = setup.reward_config.refresh_steps;
                m.refresh(&setup.source_data, &setup.reward_config, steps, rng)?;
                refreshed = true;
            }
            if refreshed {
                refresh_count += 1;
                log::info!("refreshed bridge/reward models at step {done_steps}");
            }
        }

        if setup.snapshot_at.contains(&done_steps) {
            snapshots.push((done_steps, agent.policy.clone()));
        }
        if done_steps % cfg.eval_interval == 0 || done_steps == total_steps {
            let report = evaluate_policy(
                &agent.policy.deterministic(),
                &setup.target,
                cfg.eval_episodes,
                &mut Rng::seed_from(cfg.eval_seed),
            )?;
            let normalized = match &setup.references {
                Some(r) => Some(r.normalize(report.mean)?),
                None => None,
            };
            metrics.push(MetricsRow {
                step: done_steps,
                source_return: mean_opt(&src_returns),
                modulated_return: mean_opt(&mod_returns),
                eval_return_target: report.mean,
                normalized_score: normalized,
                critic_loss: mean_opt(&closs),
                actor_loss: mean_opt(&aloss),
                il_loss: mean_opt(&iloss),
                refresh_count,
            });
            log::debug!("{:?}", metrics.last());
            src_returns.clear();
            mod_returns.clear();
            closs.clear();
            aloss.clear();
            iloss.clear();
        }
    }
    setup.demos = demos;
    Ok(OnlineResult {
        agent,
        metrics,
        refresh_count,
        bc_trace,
        buffer,
        snapshots,
        setup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::TransitionLayout;

    fn fd_check(params: usize, analytic: &Gradients, mut f: impl FnMut(usize, usize, f64) -> f64, sizes: &[usize]) {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for p in 0..params {
            for i in 0..sizes[p] {
                let fd = (f(p, i, h) - f(p, i, -h)) / (2.0 * h);
                let a = analytic.params[p].data()[i];
                worst = worst.max((a - fd).abs() / (a.abs() + fd.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "relative error {worst:e}");
    }

    #[test]
    fn bc_gradient_matches_finite_differences() {
        let mut rng = Rng::seed_from(11);
        let policy = GaussianPolicy::new(3, 2, &[8, 8], &mut rng).unwrap();
        let s = Tensor::from_rows(&[[0.1, -0.4, 0.9], [1.2, 0.3, -0.5], [0.0, 0.7, 0.2]]).unwrap();
        let a = Tensor::from_rows(&[[0.5, -0.2], [-0.9, 0.1], [0.3, 0.95]]).unwrap();
        let (_, (head, g)) = policy.nll_and_grad(&s, &a, 1.0).unwrap();
        let analytic = policy.net.backward(&head.cache, &g).unwrap();
        let sizes: Vec<usize> = policy.net.params().iter().map(|t| t.len()).collect();
        let mut probe = policy.clone();
        fd_check(sizes.len(), &analytic, |p, i, h| {
            let orig = probe.net.params()[p].data()[i];
            probe.net.params_mut()[p].data_mut()[i] = orig + h;
            let v = stats::mean(&probe.nll_and_grad(&s, &a, 1.0).unwrap().0);
            probe.net.params_mut()[p].data_mut()[i] = orig;
            v
        }, &sizes);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = Rng::seed_from(12);
        let cfg = AgentConfig {
            hidden: vec![8, 8],
            ..AgentConfig::default()
        };
        let sac = Sac::new(3, 2, cfg, &mut rng).unwrap();
        let s = Tensor::from_rows(&[[0.1, -0.4, 0.9], [1.2, 0.3, -0.5], [0.0, 0.7, 0.2]]).unwrap();
        let (_, analytic, _) = sac.actor_loss_and_grad(&s, 0.3, &mut Rng::seed_from(99)).unwrap();
        let sizes: Vec<usize> = sac.policy.net.params().iter().map(|t| t.len()).collect();
        let mut probe = sac.clone();
        fd_check(sizes.len(), &analytic, |p, i, h| {
            let orig = probe.policy.net.params()[p].data()[i];
            probe.policy.net.params_mut()[p].data_mut()[i] = orig + h;
            let v = probe.actor_loss_and_grad(&s, 0.3, &mut Rng::seed_from(99)).unwrap().0;
            probe.policy.net.params_mut()[p].data_mut()[i] = orig;
            v
        }, &sizes);
    }

    #[test]
    fn log1m_tanh2_matches_direct_form() {
        for u in [-3.0, -0.5, 0.0, 0.2, 1.7, 4.0] {
            let t: f64 = (u as f64).tanh();
            assert!((log1m_tanh2(u) - (1.0 - t * t).ln()).abs() < 1e-12);
        }
        assert!(log1m_tanh2(50.0).is_finite());
        assert!(log1m_tanh2(-50.0).is_finite());
    }

    #[test]
    fn log_std_clamp_respected() {
        let mut rng = Rng::seed_from(3);
        let mut p = GaussianPolicy::new(2, 2, &[8], &mut rng).unwrap();
        let last = p.net.layers_mut().len() - 1;
        p.net.layers_mut()[last].bias.data_mut().copy_from_slice(&[0.0, 0.0, 40.0, -40.0]);
        let s = Tensor::from_rows(&[[0.1, 0.2], [3.0, -1.0]]).unwrap();
        let sample = p.sample(&s, &mut rng).unwrap();
        for l in &sample.head.log_std {
            assert!((LOG_STD_MIN..=LOG_STD_MAX).contains(l));
        }
        assert!(sample.log_prob.iter().all(|v| v.is_finite()));
        assert!(sample.action.data().iter().all(|a| (-1.0..=1.0).contains(a)));
    }

    #[test]
    fn log_prob_finite_inside_the_box() {
        let mut rng = Rng::seed_from(4);
        let p = GaussianPolicy::new(1, 1, &[4], &mut rng).unwrap();
        let s = Tensor::from_rows(&[[0.0], [0.0], [0.0]]).unwrap();
        let a = Tensor::from_rows(&[[-0.999999], [0.0], [1.0]]).unwrap();
        assert!(p.log_prob(&s, &a).unwrap().iter().all(|v| v.is_finite()));
        let bad = Tensor::from_rows(&[[1.5], [0.0], [0.0]]).unwrap();
        assert!(p.log_prob(&s, &bad).is_err());
    }

    #[test]
    fn sampled_log_prob_matches_density_of_the_action() {
        let mut rng = Rng::seed_from(5);
        let p = GaussianPolicy::new(3, 2, &[8], &mut rng).unwrap();
        let s = Tensor::from_rows(&[[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]]).unwrap();
        let sample = p.sample(&s, &mut rng).unwrap();
        let lp = p.log_prob(&s, &sample.action).unwrap();
        for (a, b) in lp.iter().zip(&sample.log_prob) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn gamma_zero_target_is_reward() {
        let mut rng = Rng::seed_from(6);
        let cfg = AgentConfig {
            gamma: 0.0,
            hidden: vec![8],
            ..AgentConfig::default()
        };
        let sac = Sac::new(2, 1, cfg, &mut rng).unwrap();
        let batch = Batch {
            s: Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap(),
            a: Tensor::from_rows(&[[0.3], [-0.2]]).unwrap(),
            r: vec![1.25, -0.5],
            s_next: Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            done: vec![0.0, 0.0],
        };
        assert_eq!(sac.critic_targets(&batch, &mut rng).unwrap(), vec![1.25, -0.5]);
    }

    #[test]
    fn zero_imitation_weight_reports_zero() {
        let mut rng = Rng::seed_from(7);
        let cfg = AgentConfig {
            imitation_weight: 0.0,
            hidden: vec![8],
            ..AgentConfig::default()
        };
        let mut sac = Sac::new(1, 1, cfg, &mut rng).unwrap();
        let mut demos = Dataset::new(TransitionLayout::new(1, 1), false);
        demos
            .push(Transition {
                s: vec![0.5],
                a: vec![0.2],
                s_next: vec![0.6],
                r: None,
                done: false,
            })
            .unwrap();
        let batch = Batch {
            s: Tensor::from_rows(&[[0.0]]).unwrap(),
            a: Tensor::from_rows(&[[0.3]]).unwrap(),
            r: vec![1.0],
            s_next: Tensor::from_rows(&[[0.1]]).unwrap(),
            done: vec![0.0],
        };
        let st = sac.update(&batch, Some(&demos), &mut rng).unwrap();
        assert_eq!(st.il_loss, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(AgentConfig::default().validate().is_ok());
        assert!(AgentConfig { gamma: 1.0, ..AgentConfig::default() }.validate().is_err());
        assert!(AgentConfig { imitation_weight: -1.0, ..AgentConfig::default() }.validate().is_err());
    }

    #[test]
    fn normalized_score_anchors() {
        let r = ReferenceReturns {
            random: -300.0,
            expert: -100.0,
        };
        assert_eq!(r.normalize(-300.0).unwrap(), 0.0);
        assert_eq!(r.normalize(-100.0).unwrap(), 100.0);
        assert!(normalized_score(0.0, None).is_err());
    }

    #[test]
    fn single_episode_consumes_horizon() {
        let spec = EnvSpec::pointmass(crate::envsim::PhysicsKnobs::CANONICAL);
        let policy = RandomPolicy { action_dim: 2 };
        let rep = evaluate_policy(&policy, &spec, 1, &mut Rng::seed_from(1)).unwrap();
        assert_eq!(rep.steps, 200);
    }
}
