//! Diffusion Schrödinger bridge between the source and target transition
//! distributions, fitted by iterative Markovian fitting (IMF) with a Brownian
//! reference process.
//!
//! Times live on the bridge axis `k ∈ [0, 1]`: `k = 0` is the source side and
//! `k = 1` the target side. The forward drift `v_θ(k, p)` regresses the
//! bridge drift `(p₁ − p_k)/(1 − k)` and is integrated upward from `k = 0`;
//! the backward drift `v_φ(k, p)` regresses `(p₀ − p_k)/k` and is integrated
//! downward from `k = 1`, always queried at its own bridge time.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::datasets::{Dataset, Normalizer, TransitionLayout};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::stats;
use crate::tensornet::{Activation, Adam, AdamConfig, Mlp, Tensor};

/// Rows integrated per RNG stream; fixed so results do not depend on the
/// number of worker threads.
const EM_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeEmbedding {
    AppendScalar,
    Sinusoidal,
}

impl TimeEmbedding {
    const FREQUENCIES: usize = 4;

    pub fn width(self) -> usize {
        match self {
            TimeEmbedding::AppendScalar => 1,
            TimeEmbedding::Sinusoidal => 2 * Self::FREQUENCIES,
        }
    }

    fn write(self, k: f64, out: &mut Vec<f64>) {
        match self {
            TimeEmbedding::AppendScalar => out.push(k),
            TimeEmbedding::Sinusoidal => {
                for i in 0..Self::FREQUENCIES {
                    let w = std::f64::consts::PI * (1u32 << i) as f64;
                    out.push((w * k).sin());
                    out.push((w * k).cos());
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    /// Diffusion magnitude σ₀, in normalized units.
    pub sigma0: f64,
    /// Euler–Maruyama steps K; the step size is 1/K.
    pub steps: usize,
    /// IMF outer rounds. Each round trains the backward then the forward drift.
    pub n_outer: usize,
    /// Adam steps per half-iteration.
    pub inner_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub k_min: f64,
    pub k_max: f64,
    /// Hold the `[s; a]` segments fixed while integrating a translation.
    pub anchor_condition: bool,
    pub time_embedding: TimeEmbedding,
    /// Endpoint pairs regenerated per half-iteration.
    pub cache_size: usize,
    /// Samples used for the per-round marginal diagnostics.
    pub diagnostic_samples: usize,
    /// Decay of the weight average used for integration; 0 integrates with
    /// the raw training weights.
    pub ema_decay: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            sigma0: 0.5,
            steps: 30,
            n_outer: 10,
            inner_steps: 2000,
            batch: 256,
            lr: 1e-3,
            hidden: vec![256, 256],
            k_min: 0.01,
            k_max: 0.99,
            anchor_condition: true,
            time_embedding: TimeEmbedding::AppendScalar,
            cache_size: 4096,
            diagnostic_samples: 2048,
            ema_decay: 0.999,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("bridge config: {m}")));
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return bad("sigma0 must be > 0");
        }
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.n_outer == 0 {
            return bad("n_outer must be >= 1");
        }
        if self.batch == 0 || self.cache_size == 0 {
            return bad("batch and cache_size must be >= 1");
        }
        if !(0.0 < self.k_min && self.k_min < self.k_max && self.k_max < 1.0) {
            return bad("need 0 < k_min < k_max < 1");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must be in [0, 1)");
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// Time-conditioned velocity field.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftModel {
    pub direction: Direction,
    pub embedding: TimeEmbedding,
    pub net: Mlp,
}

impl DriftModel {
    pub fn new(direction: Direction, dim: usize, cfg: &BridgeConfig, rng: &mut Rng) -> Result<Self> {
        let mut sizes = vec![dim + cfg.time_embedding.width()];
        sizes.extend(&cfg.hidden);
        sizes.push(dim);
        Ok(Self {
            direction,
            embedding: cfg.time_embedding,
            net: Mlp::new(&sizes, Activation::Tanh, Activation::Identity, rng)?,
        })
    }

    pub fn zeros(direction: Direction, dim: usize, cfg: &BridgeConfig) -> Result<Self> {
        let mut sizes = vec![dim + cfg.time_embedding.width()];
        sizes.extend(&cfg.hidden);
        sizes.push(dim);
        Ok(Self {
            direction,
            embedding: cfg.time_embedding,
            net: Mlp::zeros(&sizes, Activation::Tanh, Activation::Identity)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Network input `[p, emb(k)]` with one time per row.
    pub fn input(&self, times: &[f64], p: &Tensor) -> Result<Tensor> {
        if p.cols() != self.dim() {
            return Err(Error::dim("drift input", self.dim(), p.cols()));
        }
        let mut data = Vec::with_capacity(p.rows() * self.net.input_dim());
        for (r, &k) in times.iter().enumerate() {
            data.extend_from_slice(p.row(r));
            self.embedding.write(k, &mut data);
        }
        Tensor::new(vec![p.rows(), self.net.input_dim()], data)
    }

    pub fn velocity(&self, k: f64, p: &Tensor) -> Result<Tensor> {
        let times = vec![k; p.rows()];
        self.net.forward(&self.input(&times, p)?)
    }
}

fn check_time(k: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::InvalidArgument(format!("bridge time {k} outside [0, 1]")));
    }
    Ok(())
}

/// Brownian-bridge sample with explicit noise `z`.
pub fn interpolate_with(p0: &[f64], p1: &[f64], k: f64, sigma0: f64, z: &[f64]) -> Vec<f64> {
    // k(1 − k) is exactly zero at the endpoints, so they are returned bitwise.
    let noise = sigma0 * (k * (1.0 - k)).sqrt();
    p0.iter()
        .zip(p1)
        .zip(z)
        .map(|((a, b), zz)| {
            if k == 0.0 {
                *a
            } else if k == 1.0 {
                *b
            } else {
                (1.0 - k) * a + k * b + noise * zz
            }
        })
        .collect()
}

/// `p_k = (1 − k)·p₀ + k·p₁ + σ₀·√(k(1 − k))·z`, `z ~ N(0, I)`.
pub fn bridge_interpolate(p0: &[f64], p1: &[f64], k: f64, sigma0: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if p0.len() != p1.len() {
        return Err(Error::dim("bridge_interpolate endpoints", p0.len(), p1.len()));
    }
    check_time(k)?;
    let mut z = vec![0.0; p0.len()];
    rng.fill_normal(&mut z);
    Ok(interpolate_with(p0, p1, k, sigma0, &z))
}

/// Regression target of the bridge drift. `endpoint` is `p₁` for the forward
/// direction and `p₀` for the backward one.
pub fn bridge_drift_target(endpoint: &[f64], p_k: &[f64], k: f64, direction: Direction) -> Result<Vec<f64>> {
    if endpoint.len() != p_k.len() {
        return Err(Error::dim("bridge_drift_target", endpoint.len(), p_k.len()));
    }
    let denom = match direction {
        Direction::Forward if k < 1.0 => 1.0 - k,
        Direction::Backward if k > 0.0 => k,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "bridge time {k} makes the {direction:?} drift target singular"
            )))
        }
    };
    check_time(k)?;
    Ok(endpoint.iter().zip(p_k).map(|(e, p)| (e - p) / denom).collect())
}

/// Endpoint pairs `(zero side, one side)` for one half-iteration: `(p̂₀, p₁)`
/// when training forward, `(p₀, p̂₁)` when training backward.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingCache {
    pub zero: Tensor,
    pub one: Tensor,
}

impl CouplingCache {
    pub fn new(zero: Tensor, one: Tensor) -> Result<Self> {
        if zero.shape() != one.shape() {
            return Err(Error::Shape {
                context: "coupling cache".into(),
                expected: zero.shape().to_vec(),
                got: one.shape().to_vec(),
            });
        }
        Ok(Self { zero, one })
    }

    pub fn len(&self) -> usize {
        self.zero.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.zero.rows() == 0
    }
}

/// Mean squared drift-matching loss over rows and dims, with its gradient
/// w.r.t. the prediction.
pub fn drift_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    pred.check_same_shape(target, "drift loss")?;
    let n = pred.len().max(1) as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Running weight average of a drift net.
#[derive(Debug, Clone)]
pub struct WeightAverage {
    pub net: Mlp,
    pub updates: u64,
}

impl WeightAverage {
    pub fn new(net: Mlp) -> Self {
        Self { net, updates: 0 }
    }

    /// Averages in `raw` with decay `min(decay, (1 + t) / (10 + t))`.
    pub fn update(&mut self, raw: &Mlp, decay: f64) -> Result<()> {
        let t = self.updates as f64;
        let d = decay.min((1.0 + t) / (10.0 + t));
        self.updates += 1;
        self.net.polyak_update(raw, 1.0 - d)
    }
}

/// Minibatch Adam on the drift-matching loss for `cfg.inner_steps` steps,
/// folding each step into `average` when given. Returns the per-step loss
/// trace.
pub fn train_drift_half_iteration(
    model: &mut DriftModel,
    opt: &mut Adam,
    mut average: Option<&mut WeightAverage>,
    cache: &CouplingCache,
    cfg: &BridgeConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if cache.is_empty() {
        return Err(Error::Empty("coupling cache".into()));
    }
    let dim = model.dim();
    if cache.zero.cols() != dim {
        return Err(Error::dim("coupling cache width", dim, cache.zero.cols()));
    }
    let mut trace = Vec::with_capacity(cfg.inner_steps);
    let mut z = vec![0.0; dim];
    for step in 0..cfg.inner_steps {
        let mut times = Vec::with_capacity(cfg.batch);
        let mut points = Vec::with_capacity(cfg.batch * dim);
        let mut targets = Vec::with_capacity(cfg.batch * dim);
        for _ in 0..cfg.batch {
            let i = rng.index(cache.len());
            let k = rng.uniform(cfg.k_min, cfg.k_max);
            rng.fill_normal(&mut z);
            let (p0, p1) = (cache.zero.row(i), cache.one.row(i));
            let pk = interpolate_with(p0, p1, k, cfg.sigma0, &z);
            let endpoint = match model.direction {
                Direction::Forward => p1,
                Direction::Backward => p0,
            };
            targets.extend(bridge_drift_target(endpoint, &pk, k, model.direction)?);
            points.extend(pk);
            times.push(k);
        }
        let points = Tensor::new(vec![cfg.batch, dim], points)?;
        let targets = Tensor::new(vec![cfg.batch, dim], targets)?;
        let input = model.input(&times, &points)?;
        let cache_fwd = model.net.forward_cached(&input)?;
        let (loss, grad) = drift_loss(cache_fwd.output(), &targets)?;
        if !loss.is_finite() {
            return Err(Error::non_finite(format!(
                "{:?} drift loss at inner step {step} (last finite loss {:?})",
                model.direction,
                trace.last()
            )));
        }
        let grads = model.net.backward(&cache_fwd, &grad)?;
        opt.apply(&mut model.net.params_mut(), &grads.params)?;
        if let Some(avg) = average.as_deref_mut() {
            avg.update(&model.net, cfg.ema_decay)?;
        }
        trace.push(loss);
    }
    Ok(trace)
}

/// Bridge time at which a model is queried on integration step `j`: upward
/// `j·Δk` for the forward drift, downward `(K − j)·Δk` for the backward one.
pub fn query_time(direction: Direction, j: usize, steps: usize) -> f64 {
    match direction {
        Direction::Forward => j as f64 / steps as f64,
        Direction::Backward => (steps - j) as f64 / steps as f64,
    }
}

fn em_chunk(
    start: &Tensor,
    model: &DriftModel,
    cfg: &BridgeConfig,
    anchor: Option<usize>,
    rng: &mut Rng,
    mut record: Option<(&mut Vec<Tensor>, usize)>,
) -> Result<Tensor> {
    let dt = cfg.dt();
    let noise = cfg.sigma0 * dt.sqrt();
    let mut p = start.clone();
    let mut xi = vec![0.0; p.len()];
    for j in 0..cfg.steps {
        let k = query_time(model.direction, j, cfg.steps);
        let v = model.velocity(k, &p)?;
        rng.fill_normal(&mut xi);
        for ((pv, vv), x) in p.data_mut().iter_mut().zip(v.data()).zip(&xi) {
            *pv += vv * dt + noise * x;
        }
        if let Some(c) = anchor {
            for r in 0..p.rows() {
                p.row_mut(r)[..c].copy_from_slice(&start.row(r)[..c]);
            }
        }
        if !p.is_finite() {
            return Err(Error::non_finite(format!(
                "Euler–Maruyama state at step {j} ({:?})",
                model.direction
            )));
        }
        if let Some((path, every)) = record.as_mut() {
            if (j + 1) % *every == 0 {
                path.push(p.clone());
            }
        }
    }
    Ok(p)
}

/// Euler–Maruyama integration of every row of `start` over `cfg.steps` steps:
/// `p ← p + v(k, p)·Δk + σ₀·√Δk·ξ`. With `anchor = Some(c)` the first `c`
/// columns are reset to their starting values after every step.
pub fn em_integrate(
    start: &Tensor,
    model: &DriftModel,
    cfg: &BridgeConfig,
    anchor: Option<usize>,
    rng: &mut Rng,
) -> Result<Tensor> {
    if start.cols() != model.dim() {
        return Err(Error::dim("em_integrate start", model.dim(), start.cols()));
    }
    let master = rng.fork_seed();
    let rows = start.rows();
    let chunks: Vec<(usize, usize)> = (0..rows)
        .step_by(EM_CHUNK)
        .map(|lo| (lo, (lo + EM_CHUNK).min(rows)))
        .collect();
    let parts: Vec<Result<Tensor>> = chunks
        .par_iter()
        .enumerate()
        .map(|(c, &(lo, hi))| {
            let idx: Vec<usize> = (lo..hi).collect();
            let block = start.select_rows(&idx);
            let mut r = Rng::stream(master, c as u64);
            em_chunk(&block, model, cfg, anchor, &mut r, None)
        })
        .collect();
    let mut data = Vec::with_capacity(start.len());
    for part in parts {
        data.extend(part?.into_data());
    }
    Tensor::new(vec![rows, start.cols()], data)
}

/// Like [`em_integrate`] for a single chunk, also returning the state after
/// every `every` steps.
pub fn em_path(
    start: &Tensor,
    model: &DriftModel,
    cfg: &BridgeConfig,
    every: usize,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    let mut path = vec![start.clone()];
    em_chunk(start, model, cfg, None, rng, Some((&mut path, every.max(1))))?;
    Ok(path)
}

/// Marginal statistics of one IMF round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub round: usize,
    /// ‖mean(forward endpoints) − mean(target)‖.
    pub forward_mean_distance: f64,
    /// Frobenius distance between covariances of the same pair.
    pub forward_cov_distance: f64,
    pub backward_mean_distance: f64,
    pub backward_cov_distance: f64,
    pub forward_loss: f64,
    pub backward_loss: f64,
}

fn marginal_distance(generated: &Tensor, reference_mean: &[f64], reference_cov: &[f64]) -> (f64, f64) {
    let (m, c) = stats::mean_cov(generated.data(), generated.cols());
    (stats::euclidean(&m, reference_mean), stats::euclidean(&c, reference_cov))
}

fn tail_mean(trace: &[f64]) -> f64 {
    let n = (trace.len() / 10).max(1).min(trace.len());
    stats::mean(&trace[trace.len() - n..])
}

fn sample_rows(x: &Tensor, n: usize, rng: &mut Rng) -> Tensor {
    let idx: Vec<usize> = (0..n).map(|_| rng.index(x.rows())).collect();
    x.select_rows(&idx)
}

/// State of an IMF fit: both drifts, their optimizers, and the round count.
/// `forward` and `backward` hold the weights used for integration (the
/// running averages when `ema_decay > 0`); training steps the raw copies.
#[derive(Debug, Clone)]
pub struct Imf {
    pub config: BridgeConfig,
    pub forward: DriftModel,
    pub backward: DriftModel,
    forward_raw: DriftModel,
    backward_raw: DriftModel,
    forward_avg: WeightAverage,
    backward_avg: WeightAverage,
    forward_opt: Adam,
    backward_opt: Adam,
    rounds: usize,
    diag_seed: u64,
}

impl Imf {
    pub fn new(dim: usize, config: BridgeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let forward = DriftModel::new(Direction::Forward, dim, &config, rng)?;
        let backward = DriftModel::new(Direction::Backward, dim, &config, rng)?;
        Ok(Self::from_models(config, forward, backward, rng.fork_seed()))
    }

    pub fn from_models(config: BridgeConfig, forward: DriftModel, backward: DriftModel, diag_seed: u64) -> Self {
        let adam = AdamConfig::with_lr(config.lr);
        let forward_opt = Adam::new(adam, &forward.net.params());
        let backward_opt = Adam::new(adam, &backward.net.params());
        Self {
            config,
            forward_raw: forward.clone(),
            backward_raw: backward.clone(),
            forward_avg: WeightAverage::new(forward.net.clone()),
            backward_avg: WeightAverage::new(backward.net.clone()),
            forward,
            backward,
            forward_opt,
            backward_opt,
            rounds: 0,
            diag_seed,
        }
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds
    }

    /// One IMF round: refit the backward drift on `(p₀, p̂₁)` with `p̂₁`
    /// pushed forward from real source samples (the independent partner on
    /// the very first round), then refit the forward drift on `(p̂₀, p₁)`
    /// with `p̂₀` pulled back from real target samples.
    pub fn round(&mut self, source: &Tensor, target: &Tensor, rng: &mut Rng) -> Result<RoundDiagnostics> {
        if source.rows() == 0 || target.rows() == 0 {
            return Err(Error::Empty("IMF needs nonempty source and target samples".into()));
        }
        if source.cols() != target.cols() || source.cols() != self.forward.dim() {
            return Err(Error::dim("IMF sample width", self.forward.dim(), source.cols().max(target.cols())));
        }
        let cfg = self.config.clone();
        let n = cfg.cache_size;

        let p0 = sample_rows(source, n, rng);
        let p1_hat = if self.rounds == 0 {
            sample_rows(target, n, rng)
        } else {
            em_integrate(&p0, &self.forward, &cfg, None, rng)?
        };
        let cache = CouplingCache::new(p0, p1_hat)?;
        let backward_trace = self.train(Direction::Backward, &cache, rng)?;

        let p1 = sample_rows(target, n, rng);
        let p0_hat = em_integrate(&p1, &self.backward, &cfg, None, rng)?;
        let cache = CouplingCache::new(p0_hat, p1)?;
        let forward_trace = self.train(Direction::Forward, &cache, rng)?;

        let diag = self.diagnose(source, target, tail_mean(&forward_trace), tail_mean(&backward_trace))?;
        log::debug!("IMF round {}: {:?}", self.rounds, diag);
        self.rounds += 1;
        Ok(diag)
    }

    fn train(&mut self, direction: Direction, cache: &CouplingCache, rng: &mut Rng) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let (raw, avg, opt, used) = match direction {
            Direction::Forward => (&mut self.forward_raw, &mut self.forward_avg, &mut self.forward_opt, &mut self.forward),
            Direction::Backward => (&mut self.backward_raw, &mut self.backward_avg, &mut self.backward_opt, &mut self.backward),
        };
        let averaging = cfg.ema_decay > 0.0;
        let trace = train_drift_half_iteration(raw, opt, averaging.then_some(&mut *avg), cache, cfg, rng)?;
        used.net = if averaging { avg.net.clone() } else { raw.net.clone() };
        Ok(trace)
    }

    fn diagnose(&self, source: &Tensor, target: &Tensor, fl: f64, bl: f64) -> Result<RoundDiagnostics> {
        // Fixed seed: every round is measured on the same starts and noise.
        let mut rng = Rng::seed_from(self.diag_seed);
        let n = self.config.diagnostic_samples.max(2);
        let (tm, tc) = stats::mean_cov(target.data(), target.cols());
        let (sm, sc) = stats::mean_cov(source.data(), source.cols());
        let starts = sample_rows(source, n, &mut rng);
        let fwd = em_integrate(&starts, &self.forward, &self.config, None, &mut rng)?;
        let starts = sample_rows(target, n, &mut rng);
        let bwd = em_integrate(&starts, &self.backward, &self.config, None, &mut rng)?;
        let (fmd, fcd) = marginal_distance(&fwd, &tm, &tc);
        let (bmd, bcd) = marginal_distance(&bwd, &sm, &sc);
        Ok(RoundDiagnostics {
            round: self.rounds,
            forward_mean_distance: fmd,
            forward_cov_distance: fcd,
            backward_mean_distance: bmd,
            backward_cov_distance: bcd,
            forward_loss: fl,
            backward_loss: bl,
        })
    }
}

/// Fit both drifts by `cfg.n_outer` IMF rounds on matrices of (already
/// normalized) vectors.
pub fn imf_fit(source: &Tensor, target: &Tensor, cfg: &BridgeConfig, rng: &mut Rng) -> Result<(Imf, Vec<RoundDiagnostics>)> {
    if source.cols() != target.cols() {
        return Err(Error::dim("imf_fit widths", source.cols(), target.cols()));
    }
    let mut imf = Imf::new(source.cols(), cfg.clone(), rng)?;
    let mut diags = Vec::with_capacity(cfg.n_outer);
    for _ in 0..cfg.n_outer {
        diags.push(imf.round(source, target, rng)?);
    }
    Ok((imf, diags))
}

/// A fitted bridge over packed transitions, with the normalizer it was
/// trained under.
#[derive(Debug, Clone)]
pub struct Bridge {
    pub layout: TransitionLayout,
    pub normalizer: Normalizer,
    pub imf: Imf,
}

impl Bridge {
    /// Normalizer over the union of both datasets' packed transitions.
    pub fn fit_normalizer(source: &Dataset, target: &Dataset) -> Result<Normalizer> {
        Normalizer::fit(&[&source.packed_matrix(), &target.packed_matrix()])
    }

    pub fn fit(
        source: &Dataset,
        target: &Dataset,
        cfg: &BridgeConfig,
        rng: &mut Rng,
    ) -> Result<(Bridge, Vec<RoundDiagnostics>)> {
        if source.layout() != target.layout() {
            return Err(Error::InvalidArgument(format!(
                "source layout {:?} differs from target layout {:?}",
                source.layout(),
                target.layout()
            )));
        }
        if source.is_empty() || target.is_empty() {
            return Err(Error::Empty("bridge fit needs nonempty datasets".into()));
        }
        let normalizer = Self::fit_normalizer(source, target)?;
        let xs = normalizer.normalize(&source.packed_matrix())?;
        let xt = normalizer.normalize(&target.packed_matrix())?;
        let (imf, diags) = imf_fit(&xs, &xt, cfg, rng)?;
        Ok((
            Bridge {
                layout: source.layout(),
                normalizer,
                imf,
            },
            diags,
        ))
    }

    /// One additional IMF round on (possibly augmented) datasets, keeping
    /// the fit-time normalizer.
    pub fn refresh(&mut self, source: &Dataset, target: &Dataset, rng: &mut Rng) -> Result<RoundDiagnostics> {
        let xs = self.normalizer.normalize(&source.packed_matrix())?;
        let xt = self.normalizer.normalize(&target.packed_matrix())?;
        self.imf.round(&xs, &xt, rng)
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.imf.config
    }

    /// Translate packed raw transitions `[n, 2S + A]` in either direction and
    /// return full raw vectors.
    pub fn translate_packed(&self, packed: &Tensor, direction: Direction, rng: &mut Rng) -> Result<Tensor> {
        if packed.cols() != self.layout.len() {
            return Err(Error::dim("translate input", self.layout.len(), packed.cols()));
        }
        let z = self.normalizer.normalize(packed)?;
        let model = match direction {
            Direction::Forward => &self.imf.forward,
            Direction::Backward => &self.imf.backward,
        };
        let cfg = self.config();
        let anchor = cfg.anchor_condition.then(|| self.layout.condition_len());
        let out = em_integrate(&z, model, cfg, anchor, rng)?;
        let mut out = self.normalizer.denormalize(&out)?;
        if let Some(c) = anchor {
            for r in 0..out.rows() {
                out.row_mut(r)[..c].copy_from_slice(&packed.row(r)[..c]);
            }
        }
        if !out.is_finite() {
            return Err(Error::non_finite("translated transition"));
        }
        Ok(out)
    }

    fn translate_one(&self, s: &[f64], a: &[f64], s_next: &[f64], direction: Direction, rng: &mut Rng) -> Result<Vec<f64>> {
        let p = self.layout.pack(s, a, s_next)?;
        let t = Tensor::new(vec![1, self.layout.len()], p.as_slice().to_vec())?;
        let out = self.translate_packed(&t, direction, rng)?;
        Ok(out.row(0)[self.layout.offsets()[2]..].to_vec())
    }

    /// Target-style next state for a source transition.
    pub fn translate_s_to_t(&self, s: &[f64], a: &[f64], s_next: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        self.translate_one(s, a, s_next, Direction::Forward, rng)
    }

    /// Source-style next state for a target transition.
    pub fn translate_t_to_s(&self, s: &[f64], a: &[f64], s_next: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        self.translate_one(s, a, s_next, Direction::Backward, rng)
    }

    /// Translate every transition of a dataset; rewards are dropped since
    /// they no longer describe the translated transitions.
    pub fn translate_dataset(&self, ds: &Dataset, direction: Direction, rng: &mut Rng) -> Result<Dataset> {
        let mut out = Dataset::new(ds.layout(), false);
        if ds.is_empty() {
            return Ok(out);
        }
        let translated = self.translate_packed(&ds.packed_matrix(), direction, rng)?;
        let [_, oa, on] = self.layout.offsets();
        for (i, t) in ds.transitions().iter().enumerate() {
            let row = translated.row(i);
            out.push(crate::datasets::Transition {
                s: row[..oa].to_vec(),
                a: row[oa..on].to_vec(),
                s_next: row[on..].to_vec(),
                r: None,
                done: t.done,
            })?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "layout": self.layout,
            "config": self.config(),
            "rounds": self.imf.rounds_done(),
        });
        let mut c = Container::new("bridge", meta);
        c.push_mlp("forward", &self.imf.forward.net);
        c.push_mlp("backward", &self.imf.backward.net);
        self.normalizer.write_to(&mut c, "normalizer");
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Bridge> {
        let c = Container::load(path)?;
        c.expect_kind("bridge")?;
        let layout: TransitionLayout = serde_json::from_value(c.meta["layout"].clone())?;
        let config: BridgeConfig = serde_json::from_value(c.meta["config"].clone())?;
        let rounds = c.meta["rounds"].as_u64().unwrap_or(0) as usize;
        let forward = DriftModel {
            direction: Direction::Forward,
            embedding: config.time_embedding,
            net: c.read_mlp("forward")?,
        };
        let backward = DriftModel {
            direction: Direction::Backward,
            embedding: config.time_embedding,
            net: c.read_mlp("backward")?,
        };
        let normalizer = Normalizer::read_from(&c, "normalizer")?;
        if normalizer.dim() != layout.len() {
            return Err(Error::NormalizerMismatch(format!(
                "checkpoint normalizer has {} dims, layout needs {}",
                normalizer.dim(),
                layout.len()
            )));
        }
        let mut imf = Imf::from_models(config, forward, backward, 0);
        imf.rounds = rounds;
        Ok(Bridge { layout, normalizer, imf })
    }
}
