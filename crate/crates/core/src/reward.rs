//! Transition-aware reward model `R(s, s')` and reward modulation
//! `r̃ = R(s, s̃')`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::datasets::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::stats;
use crate::tensornet::{Activation, Adam, AdamConfig, Mlp, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub holdout_fraction: f64,
    /// Adam steps per refresh on the augmented source dataset.
    pub refresh_steps: usize,
    /// Largest holdout RMSE accepted, as a fraction of the reward range.
    pub max_rmse_fraction: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            lr: 1e-3,
            batch: 256,
            steps: 5000,
            holdout_fraction: 0.1,
            refresh_steps: 1000,
            max_rmse_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub net: Mlp,
    /// Statistics of `[s, s']` over the source dataset.
    pub input_normalizer: Normalizer,
    /// The net regresses standardized rewards `(r − mean)/std`.
    pub target_mean: f64,
    pub target_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub train_mse: f64,
    pub holdout_mse: f64,
    pub holdout_rmse: f64,
    pub reward_range: f64,
    pub loss_trace: Vec<f64>,
}

impl RewardReport {
    /// Holdout RMSE must stay below `fraction` of the observed reward range.
    pub fn check_quality(&self, fraction: f64) -> Result<()> {
        let limit = fraction * self.reward_range;
        if !(self.holdout_rmse < limit) {
            return Err(Error::FitQuality {
                rmse: self.holdout_rmse,
                limit,
            });
        }
        Ok(())
    }
}

fn pair_matrix(s: &Tensor, s_next: &Tensor) -> Result<Tensor> {
    Tensor::hcat(&[s, s_next])
}

impl RewardModel {
    pub fn state_dim(&self) -> usize {
        self.net.input_dim() / 2
    }

    fn raw_output(&self, s: &Tensor, s_next: &Tensor) -> Result<Tensor> {
        let x = self.input_normalizer.normalize(&pair_matrix(s, s_next)?)?;
        self.net.forward(&x)
    }

    pub fn predict_batch(&self, s: &Tensor, s_next: &Tensor) -> Result<Vec<f64>> {
        let d = self.state_dim();
        if s.cols() != d || s_next.cols() != d {
            return Err(Error::dim("reward model state", d, if s.cols() != d { s.cols() } else { s_next.cols() }));
        }
        if s.rows() != s_next.rows() {
            return Err(Error::dim("reward model rows", s.rows(), s_next.rows()));
        }
        let out = self.raw_output(s, s_next)?;
        Ok(out.data().iter().map(|z| self.target_mean + self.target_std * z).collect())
    }

    pub fn predict(&self, s: &[f64], s_next: &[f64]) -> Result<f64> {
        let d = self.state_dim();
        if s.len() != d {
            return Err(Error::dim("reward model s", d, s.len()));
        }
        if s_next.len() != d {
            return Err(Error::dim("reward model s_next", d, s_next.len()));
        }
        let s = Tensor::new(vec![1, d], s.to_vec())?;
        let sn = Tensor::new(vec![1, d], s_next.to_vec())?;
        let r = self.predict_batch(&s, &sn)?[0];
        if !r.is_finite() {
            return Err(Error::non_finite("modulated reward"));
        }
        Ok(r)
    }

    /// Continue training on `ds` for `steps` Adam steps, keeping the input
    /// and target standardization fixed.
    pub fn refresh(&mut self, ds: &Dataset, cfg: &RewardConfig, steps: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let (x, y) = self.training_pairs(ds)?;
        let idx: Vec<usize> = (0..x.rows()).collect();
        let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &self.net.params());
        fit_steps(&mut self.net, &mut opt, &x, &y, &idx, cfg.batch, steps, rng)
    }

    fn training_pairs(&self, ds: &Dataset) -> Result<(Tensor, Vec<f64>)> {
        let r = ds.rewards()?;
        let x = self
            .input_normalizer
            .normalize(&pair_matrix(&ds.states(), &ds.next_states())?)?;
        let y = r.iter().map(|v| (v - self.target_mean) / self.target_std).collect();
        Ok((x, y))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        });
        let mut c = Container::new("reward", meta);
        c.push_mlp("net", &self.net);
        self.input_normalizer.write_to(&mut c, "normalizer");
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind("reward")?;
        let net = c.read_mlp("net")?;
        let input_normalizer = Normalizer::read_from(&c, "normalizer")?;
        if input_normalizer.dim() != net.input_dim() {
            return Err(Error::NormalizerMismatch(format!(
                "reward normalizer has {} dims, net takes {}",
                input_normalizer.dim(),
                net.input_dim()
            )));
        }
        let get = |k: &str| {
            c.meta[k]
                .as_f64()
                .ok_or_else(|| Error::Format(format!("reward checkpoint missing {k}")))
        };
        Ok(Self {
            target_mean: get("target_mean")?,
            target_std: get("target_std")?,
            net,
            input_normalizer,
        })
    }
}

/// `r̃ = R(s, s̃')`. Actions are never consulted.
pub fn modulate(model: &RewardModel, s: &[f64], s_tilde_next: &[f64]) -> Result<f64> {
    model.predict(s, s_tilde_next)
}

#[allow(clippy::too_many_arguments)]
fn fit_steps(
    net: &mut Mlp,
    opt: &mut Adam,
    x: &Tensor,
    y: &[f64],
    idx: &[usize],
    batch: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(steps);
    let b = batch.min(idx.len()).max(1);
    for step in 0..steps {
        let rows: Vec<usize> = (0..b).map(|_| idx[rng.index(idx.len())]).collect();
        let xb = x.select_rows(&rows);
        let cache = net.forward_cached(&xb)?;
        let pred = cache.output().data();
        let mut grad = Tensor::zeros(&[b, 1]);
        let mut loss = 0.0;
        for (i, (&r, g)) in rows.iter().zip(grad.data_mut()).enumerate() {
            let d = pred[i] - y[r];
            loss += d * d;
            *g = 2.0 * d / b as f64;
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("reward loss at step {step}")));
        }
        let grads = net.backward(&cache, &grad)?;
        opt.apply(&mut net.params_mut(), &grads.params)?;
        trace.push(loss);
    }
    Ok(trace)
}

fn mse(model: &RewardModel, x: &Tensor, y: &[f64], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let out = model.net.forward(&x.select_rows(idx))?;
    let s2 = model.target_std * model.target_std;
    Ok(idx
        .iter()
        .zip(out.data())
        .map(|(&i, z)| (z - y[i]).powi(2) * s2)
        .sum::<f64>()
        / idx.len() as f64)
}

/// Fit `R(s, s')` to the logged rewards by minibatch Adam on a 90/10
/// train/holdout split.
pub fn train_reward(ds: &Dataset, cfg: &RewardConfig, rng: &mut Rng) -> Result<(RewardModel, RewardReport)> {
    if !ds.has_rewards() {
        return Err(Error::MissingRewards);
    }
    if ds.is_empty() {
        return Err(Error::Empty("reward training dataset".into()));
    }
    let d = ds.layout().state_dim;
    let pairs = pair_matrix(&ds.states(), &ds.next_states())?;
    let input_normalizer = Normalizer::fit(&[&pairs])?;
    let r = ds.rewards()?;
    let target_mean = stats::mean(&r);
    let sd = stats::std(&r);
    let target_std = if sd > 1e-8 { sd } else { 1.0 };

    let mut sizes = vec![2 * d];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let net = Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng)?;
    let mut model = RewardModel {
        net,
        input_normalizer,
        target_mean,
        target_std,
    };
    let (x, y) = model.training_pairs(ds)?;

    let mut idx: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut idx);
    let n_hold = if ds.len() >= 2 {
        ((ds.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, ds.len() - 1)
    } else {
        0
    };
    let (hold, train) = idx.split_at(n_hold);

    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &model.net.params());
    let loss_trace = fit_steps(&mut model.net, &mut opt, &x, &y, train, cfg.batch, cfg.steps, rng)?;
    let train_mse = mse(&model, &x, &y, train)?;
    let holdout_mse = mse(&model, &x, &y, hold)?;
    let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let report = RewardReport {
        train_mse,
        holdout_mse,
        holdout_rmse: holdout_mse.sqrt(),
        reward_range: hi - lo,
        loss_trace,
    };
    log::info!(
        "reward model: train MSE {:.3e}, holdout MSE {:.3e}, range {:.3}",
        report.train_mse,
        report.holdout_mse,
        report.reward_range
    );
    Ok((model, report))
}
