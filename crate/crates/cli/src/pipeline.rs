//! The offline and online phases as resumable steps over a run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bdgxrl::agent::{
    bc_pretrain, evaluate_policy, random_reference, run_bdgxrl, DeterministicPolicy, GaussianPolicy, MetricsRow,
    OnlineSetup, ReferenceReturns, RewardSource, Sac,
};
use bdgxrl::bridge::{Bridge, Direction, RoundDiagnostics};
use bdgxrl::datasets::{collect_rollouts, Dataset};
use bdgxrl::envsim::{EnvSpec, Policy};
use bdgxrl::reward::{train_reward, RewardModel};
use bdgxrl::rng::splitmix64;
use bdgxrl::{stats, Rng};
use serde::{Deserialize, Serialize};

use crate::config::{AblationFlags, DemoTier, ExperimentConfig, Phase};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

pub mod paths {
    pub const CONFIG: &str = "config.json";
    pub const SOURCE: &str = "data/source.bgd";
    pub const TARGET: &str = "data/target.bgd";
    pub const EXPERT_METRICS: &str = "expert/metrics.csv";
    pub const REFERENCES: &str = "references.json";
    pub const BRIDGE: &str = "models/bridge.bdgx";
    pub const DSB_ROUNDS: &str = "metrics/dsb_rounds.csv";
    pub const REWARD: &str = "models/reward.bdgx";
    pub const REWARD_REPORT: &str = "metrics/reward_report.json";
    pub const ABLATION_TABLE: &str = "ablation/table.csv";
    pub const ABLATION_SUMMARY: &str = "ablation/summary.csv";
    pub const ABLATION_CURVES: &str = "ablation/curves.csv";
    pub const BASELINES: &str = "ablation/baselines.csv";

    pub fn expert_tier(tier: &str) -> String {
        format!("expert/{tier}.bdgx")
    }

    pub fn policy_dir(variant: &str, seed: u64) -> String {
        format!("policy/{variant}/seed{seed}")
    }
}

// Stream tags for per-phase RNGs.
const TAG_SOURCE: u64 = 1;
const TAG_EXPERT: u64 = 2;
const TAG_DEMOS: u64 = 3;
const TAG_BRIDGE: u64 = 4;
const TAG_REWARD: u64 = 5;
const TAG_ONLINE: u64 = 6;
const TAG_BC_ONLY: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub random: f64,
    pub expert: f64,
    pub expert_tier: String,
    pub tiers: BTreeMap<String, f64>,
}

impl References {
    pub fn returns(&self) -> ReferenceReturns {
        ReferenceReturns {
            random: self.random,
            expert: self.expert,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub variant: String,
    pub seed: u64,
    pub final_return: f64,
    pub normalized_score: Option<f64>,
    pub refresh_count: usize,
}

pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

fn io<T>(what: &Path, r: std::io::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::io(format!("{}", what.display()), e))
}

fn require(dir: &Path, rel: &str, what: &str) -> CliResult<PathBuf> {
    let p = dir.join(rel);
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Missing {
            what: what.to_string(),
            path: p,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        io(parent, std::fs::create_dir_all(parent))?;
    }
    io(path, std::fs::write(path, serde_json::to_string_pretty(value)? + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = io(path, std::fs::read_to_string(path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        io(parent, std::fs::create_dir_all(parent))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path.display().to_string(), e))?;
    Ok(())
}

fn mkparent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        io(parent, std::fs::create_dir_all(parent))?;
    }
    Ok(())
}

fn art(name: &str, rel: &str) -> (String, PathBuf) {
    (name.to_string(), PathBuf::from(rel))
}

impl Run {
    pub fn open(cfg: ExperimentConfig) -> CliResult<Self> {
        cfg.validate()?;
        let dir = cfg.out_dir.clone();
        io(&dir, std::fs::create_dir_all(&dir))?;
        cfg.save(&dir.join(paths::CONFIG))?;
        let manifest = RunManifest::load_or_new(&dir, &cfg.hash(), cfg.seed)?;
        manifest.save(&dir)?;
        Ok(Self { cfg, dir, manifest })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn rng(&self, tag: u64) -> Rng {
        Rng::stream(self.cfg.seed, tag)
    }

    fn online_rng(&self, seed: u64) -> Rng {
        Rng::stream(splitmix64(self.cfg.seed) ^ seed, TAG_ONLINE)
    }

    pub fn load_dataset(&self, rel: &str, what: &str) -> CliResult<Dataset> {
        Ok(Dataset::load(&require(&self.dir, rel, what)?)?)
    }

    pub fn references(&self) -> CliResult<Option<References>> {
        let p = self.path(paths::REFERENCES);
        if p.exists() {
            Ok(Some(read_json(&p)?))
        } else {
            Ok(None)
        }
    }

    /// Source dataset, target expert with its quality tiers, reference
    /// returns, and the reward-free target demos.
    pub fn collect(&mut self) -> CliResult<()> {
        let fp = self.cfg.fingerprint(Phase::Collect);
        let cfg = self.cfg.clone();
        let dir = self.dir.clone();

        let mut rng = self.rng(TAG_SOURCE);
        self.manifest.run_phase(&dir, "collect/source", &fp, || {
            let spec = cfg.source_spec();
            let policy = bdgxrl::envsim::RandomPolicy {
                action_dim: spec.action_dim(),
            };
            let ds = collect_rollouts(&spec, &policy, cfg.source_transitions, &mut rng)?;
            let p = dir.join(paths::SOURCE);
            mkparent(&p)?;
            ds.save(&p)?;
            log::info!("collected {} source transitions", ds.len());
            Ok(vec![art("source_dataset", paths::SOURCE)])
        })?;

        let mut rng = self.rng(TAG_EXPERT);
        self.manifest.run_phase(&dir, "collect/expert", &fp, || {
            let target = cfg.target_spec();
            let mut setup = OnlineSetup::plain(target.clone(), target.clone());
            setup.snapshot_at = vec![cfg.expert.early_step, cfg.expert.mid_step];
            let mut agent_cfg = cfg.expert.agent.clone();
            agent_cfg.eval_episodes = cfg.eval_episodes;
            let out = run_bdgxrl(setup, &agent_cfg, cfg.expert.steps, &mut rng)?;
            write_csv(&dir.join(paths::EXPERT_METRICS), &out.metrics)?;
            let mut tiers: Vec<(String, GaussianPolicy)> = Vec::new();
            for (step, p) in out.snapshots {
                let name = if step == cfg.expert.early_step { "early" } else { "mid" };
                tiers.push((name.into(), p));
            }
            tiers.push(("final".into(), out.agent.policy.clone()));
            let mut arts = vec![art("expert_metrics", paths::EXPERT_METRICS)];
            let mut tier_returns = BTreeMap::new();
            for (name, p) in &tiers {
                let rel = paths::expert_tier(name);
                let path = dir.join(&rel);
                mkparent(&path)?;
                p.save(&path)?;
                arts.push((format!("expert_{name}"), PathBuf::from(rel)));
                let r = evaluate_policy(
                    &p.deterministic(),
                    &target,
                    cfg.reference_episodes,
                    &mut Rng::seed_from(cfg.agent.eval_seed),
                )?;
                tier_returns.insert(name.clone(), r.mean);
            }
            let (best, expert) = tier_returns
                .iter()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, v)| (k.clone(), *v))
                .expect("at least the final tier");
            let refs = References {
                random: random_reference(&target, cfg.reference_episodes, cfg.agent.eval_seed)?,
                expert,
                expert_tier: best,
                tiers: tier_returns,
            };
            log::info!("reference returns: {refs:?}");
            write_json(&dir.join(paths::REFERENCES), &refs)?;
            arts.push(art("references", paths::REFERENCES));
            Ok(arts)
        })?;

        let mut rng = self.rng(TAG_DEMOS);
        self.manifest.run_phase(&dir, "collect/target", &fp, || {
            let tier = match cfg.expert.demo_tier {
                DemoTier::Early => "early",
                DemoTier::Mid => "mid",
                DemoTier::Final => "final",
            };
            let policy = GaussianPolicy::load(&require(&dir, &paths::expert_tier(tier), "expert checkpoint")?)?;
            let det = policy.deterministic();
            let actor: &dyn Policy = if cfg.expert.stochastic_demos { &policy } else { &det };
            let ds = collect_rollouts(&cfg.target_spec(), actor, cfg.target_transitions, &mut rng)?.without_rewards();
            let p = dir.join(paths::TARGET);
            mkparent(&p)?;
            ds.save(&p)?;
            log::info!("collected {} reward-free target transitions ({tier} tier)", ds.len());
            Ok(vec![art("target_dataset", paths::TARGET)])
        })?;
        Ok(())
    }

    pub fn train_dsb(&mut self) -> CliResult<()> {
        let fp = self.cfg.fingerprint(Phase::Bridge);
        let source = self.load_dataset(paths::SOURCE, "source dataset")?;
        let target = self.load_dataset(paths::TARGET, "target dataset")?;
        let mut rng = self.rng(TAG_BRIDGE);
        let (cfg, dir) = (self.cfg.clone(), self.dir.clone());
        self.manifest.run_phase(&dir, "train-dsb", &fp, || {
            let (bridge, diags) = Bridge::fit(&source, &target, &cfg.bridge, &mut rng)?;
            let p = dir.join(paths::BRIDGE);
            mkparent(&p)?;
            bridge.save(&p)?;
            write_csv::<RoundDiagnostics>(&dir.join(paths::DSB_ROUNDS), &diags)?;
            Ok(vec![art("bridge", paths::BRIDGE), art("dsb_rounds", paths::DSB_ROUNDS)])
        })?;
        Ok(())
    }

    pub fn train_reward(&mut self) -> CliResult<()> {
        let fp = self.cfg.fingerprint(Phase::Reward);
        let source = self.load_dataset(paths::SOURCE, "source dataset")?;
        let mut rng = self.rng(TAG_REWARD);
        let (cfg, dir) = (self.cfg.clone(), self.dir.clone());
        self.manifest.run_phase(&dir, "train-reward", &fp, || {
            let (model, report) = train_reward(&source, &cfg.reward, &mut rng)?;
            write_json(&dir.join(paths::REWARD_REPORT), &report)?;
            report.check_quality(cfg.reward.max_rmse_fraction)?;
            let p = dir.join(paths::REWARD);
            mkparent(&p)?;
            model.save(&p)?;
            Ok(vec![art("reward", paths::REWARD), art("reward_report", paths::REWARD_REPORT)])
        })?;
        Ok(())
    }

    /// One online run for a variant and seed.
    pub fn train_policy(&mut self, flags: AblationFlags, seed: u64) -> CliResult<PolicySummary> {
        let variant = flags.name();
        let rel_dir = paths::policy_dir(&variant, seed);
        let phase = format!("train-policy/{variant}/seed{seed}");
        let fp = self.cfg.fingerprint(Phase::Policy);
        let summary_rel = format!("{rel_dir}/summary.json");
        if self.manifest.is_complete(&self.dir, &phase, &fp) {
            log::info!("phase {phase} already complete, skipping");
            return read_json(&self.path(&summary_rel));
        }

        let source_data = self.load_dataset(paths::SOURCE, "source dataset")?;
        let needs_demos = !(flags.no_il && flags.no_alignment);
        let demos = if needs_demos {
            Some(self.load_dataset(paths::TARGET, "target dataset")?)
        } else {
            None
        };
        let bridge = if flags.no_alignment {
            None
        } else {
            let b = Bridge::load(&require(&self.dir, paths::BRIDGE, "bridge checkpoint")?)?;
            let expected = Bridge::fit_normalizer(&source_data, demos.as_ref().expect("demos loaded"))?;
            b.normalizer.ensure_matches(&expected)?;
            Some(b)
        };
        let reward = if flags.no_rm {
            RewardSource::Raw
        } else {
            RewardSource::Model(RewardModel::load(&require(&self.dir, paths::REWARD, "reward checkpoint")?)?)
        };
        let refs = self.references()?;
        let setup = OnlineSetup {
            source: self.cfg.source_spec(),
            target: self.cfg.target_spec(),
            demos,
            source_data,
            bridge,
            reward,
            reward_config: self.cfg.reward.clone(),
            references: refs.as_ref().map(References::returns),
            snapshot_at: Vec::new(),
        };
        let agent_cfg = self.cfg.agent_for(flags);
        let mut rng = self.online_rng(seed);
        let budget = self.cfg.budget_steps;
        let dir = self.dir.clone();
        let mut summary = None;
        self.manifest.run_phase(&dir, &phase, &fp, || {
            let out = run_bdgxrl(setup, &agent_cfg, budget, &mut rng)?;
            let last = out.metrics.last().expect("at least one evaluation row");
            let s = PolicySummary {
                variant: variant.clone(),
                seed,
                final_return: last.eval_return_target,
                normalized_score: last.normalized_score,
                refresh_count: out.refresh_count,
            };
            let metrics_rel = format!("{rel_dir}/metrics.csv");
            let ckpt_rel = format!("{rel_dir}/sac.bdgx");
            write_csv::<MetricsRow>(&dir.join(&metrics_rel), &out.metrics)?;
            out.agent.save(&dir.join(&ckpt_rel))?;
            write_json(&dir.join(&summary_rel), &s)?;
            log::info!("{variant} seed {seed}: final return {:.2}, normalized {:?}", s.final_return, s.normalized_score);
            summary = Some(s);
            Ok(vec![
                (format!("{variant}/seed{seed}/metrics"), PathBuf::from(metrics_rel)),
                (format!("{variant}/seed{seed}/checkpoint"), PathBuf::from(ckpt_rel)),
                (format!("{variant}/seed{seed}/summary"), PathBuf::from(summary_rel.clone())),
            ])
        })?;
        Ok(summary.expect("phase ran"))
    }

    /// SAC trained with raw source transitions and rewards, evaluated in the
    /// target.
    pub fn naive_source_sac(&mut self, seed: u64) -> CliResult<PolicySummary> {
        let phase = format!("baseline/naive_sac/seed{seed}");
        let rel = format!("baselines/naive_sac/seed{seed}");
        let fp = self.cfg.fingerprint(Phase::Policy);
        let summary_rel = format!("{rel}/summary.json");
        if self.manifest.is_complete(&self.dir, &phase, &fp) {
            return read_json(&self.path(&summary_rel));
        }
        let mut setup = OnlineSetup::plain(self.cfg.source_spec(), self.cfg.target_spec());
        let refs = self.references()?;
        setup.references = refs.as_ref().map(References::returns);
        let agent_cfg = self.cfg.agent_for(AblationFlags::new(true, true, true));
        let mut rng = self.online_rng(seed);
        let budget = self.cfg.budget_steps;
        let dir = self.dir.clone();
        let mut summary = None;
        self.manifest.run_phase(&dir, &phase, &fp, || {
            let out = run_bdgxrl(setup, &agent_cfg, budget, &mut rng)?;
            let last = out.metrics.last().expect("at least one evaluation row");
            let s = PolicySummary {
                variant: "naive_sac".into(),
                seed,
                final_return: last.eval_return_target,
                normalized_score: last.normalized_score,
                refresh_count: 0,
            };
            let metrics_rel = format!("{rel}/metrics.csv");
            write_csv(&dir.join(&metrics_rel), &out.metrics)?;
            write_json(&dir.join(&summary_rel), &s)?;
            summary = Some(s);
            Ok(vec![
                (format!("naive_sac/seed{seed}/metrics"), PathBuf::from(metrics_rel)),
                (format!("naive_sac/seed{seed}/summary"), PathBuf::from(summary_rel.clone())),
            ])
        })?;
        Ok(summary.expect("phase ran"))
    }

    /// Behaviour cloning on the target demos only.
    pub fn bc_only(&mut self, seed: u64) -> CliResult<PolicySummary> {
        let phase = format!("baseline/bc_only/seed{seed}");
        let rel = format!("baselines/bc_only/seed{seed}");
        let fp = self.cfg.fingerprint(Phase::Policy);
        let summary_rel = format!("{rel}/summary.json");
        if self.manifest.is_complete(&self.dir, &phase, &fp) {
            return read_json(&self.path(&summary_rel));
        }
        let demos = self.load_dataset(paths::TARGET, "target dataset")?;
        let refs = self.references()?;
        let target = self.cfg.target_spec();
        let a = self.cfg.agent.clone();
        let eval_episodes = self.cfg.eval_episodes;
        let mut rng = Rng::stream(splitmix64(self.cfg.seed) ^ seed, TAG_BC_ONLY);
        let dir = self.dir.clone();
        let mut summary = None;
        self.manifest.run_phase(&dir, &phase, &fp, || {
            let layout = demos.layout();
            let mut policy = GaussianPolicy::new(layout.state_dim, layout.action_dim, &a.hidden, &mut rng)?;
            let steps = a.bc_pretrain_steps.max(1);
            bc_pretrain(&mut policy, &demos, steps, a.batch, a.bc_lr, &mut rng)?;
            let report = evaluate_policy(&policy.deterministic(), &target, eval_episodes, &mut Rng::seed_from(a.eval_seed))?;
            let s = PolicySummary {
                variant: "bc_only".into(),
                seed,
                final_return: report.mean,
                normalized_score: match &refs {
                    Some(r) => Some(r.returns().normalize(report.mean)?),
                    None => None,
                },
                refresh_count: 0,
            };
            let ckpt_rel = format!("{rel}/policy.bdgx");
            mkparent(&dir.join(&ckpt_rel))?;
            policy.save(&dir.join(&ckpt_rel))?;
            write_json(&dir.join(&summary_rel), &s)?;
            summary = Some(s);
            Ok(vec![
                (format!("bc_only/seed{seed}/checkpoint"), PathBuf::from(ckpt_rel)),
                (format!("bc_only/seed{seed}/summary"), PathBuf::from(summary_rel.clone())),
            ])
        })?;
        Ok(summary.expect("phase ran"))
    }

    /// Offline phases needed by the given flags, then one online run.
    pub fn pipeline(&mut self, flags: AblationFlags, seed: u64) -> CliResult<PolicySummary> {
        self.collect()?;
        if !flags.no_alignment {
            self.train_dsb()?;
        }
        if !flags.no_rm {
            self.train_reward()?;
        }
        self.train_policy(flags, seed)
    }

    /// All four variants over every configured seed, plus baselines.
    pub fn ablate(&mut self) -> CliResult<AblationReport> {
        self.collect()?;
        self.train_dsb()?;
        self.train_reward()?;
        let seeds = self.cfg.seeds.clone();
        let mut rows = Vec::new();
        let mut curves = Vec::new();
        for &(name, flags) in &AblationFlags::VARIANTS {
            for &seed in &seeds {
                let s = self.train_policy(flags, seed)?;
                let metrics_path = self.path(&format!("{}/metrics.csv", paths::policy_dir(name, seed)));
                for m in read_metrics(&metrics_path)? {
                    curves.push(CurvePoint {
                        variant: name.to_string(),
                        seed,
                        step: m.step,
                        eval_return: m.eval_return_target,
                        normalized_score: m.normalized_score,
                    });
                }
                rows.push(s);
            }
        }
        let mut baselines = Vec::new();
        if self.cfg.baselines {
            for &seed in &seeds {
                baselines.push(self.naive_source_sac(seed)?);
                baselines.push(self.bc_only(seed)?);
            }
        }
        let summary = summarize(&rows);
        write_csv(&self.path(paths::ABLATION_TABLE), &rows)?;
        write_csv(&self.path(paths::ABLATION_SUMMARY), &summary)?;
        write_csv(&self.path(paths::ABLATION_CURVES), &curves)?;
        if !baselines.is_empty() {
            write_csv(&self.path(paths::BASELINES), &baselines)?;
        }
        for (name, rel) in [
            ("ablation_table", paths::ABLATION_TABLE),
            ("ablation_summary", paths::ABLATION_SUMMARY),
            ("ablation_curves", paths::ABLATION_CURVES),
        ] {
            self.manifest.record_artifact(&self.dir, name, Path::new(rel))?;
        }
        if !baselines.is_empty() {
            self.manifest.record_artifact(&self.dir, "baselines", Path::new(paths::BASELINES))?;
        }
        self.manifest.save(&self.dir)?;
        Ok(AblationReport {
            rows,
            summary,
            baselines: summarize(&baselines),
        })
    }
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub variant: String,
    pub seed: u64,
    pub step: usize,
    pub eval_return: f64,
    pub normalized_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_normalized: Option<f64>,
    pub std_normalized: Option<f64>,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<PolicySummary>,
    pub summary: Vec<VariantSummary>,
    pub baselines: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.summary.iter().chain(&self.baselines).find(|v| v.variant == name)
    }
}

/// Per-variant mean/std in first-appearance order, ranked by mean return.
pub fn summarize(rows: &[PolicySummary]) -> Vec<VariantSummary> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant) {
            order.push(r.variant.clone());
        }
    }
    let mut out: Vec<VariantSummary> = order
        .iter()
        .map(|v| {
            let mine: Vec<&PolicySummary> = rows.iter().filter(|r| &r.variant == v).collect();
            let rets: Vec<f64> = mine.iter().map(|r| r.final_return).collect();
            let norms: Option<Vec<f64>> = mine.iter().map(|r| r.normalized_score).collect();
            VariantSummary {
                variant: v.clone(),
                seeds: mine.len(),
                mean_return: stats::mean(&rets),
                std_return: stats::std(&rets),
                mean_normalized: norms.as_ref().map(|n| stats::mean(n)),
                std_normalized: norms.as_ref().map(|n| stats::std(n)),
                rank: 0,
            }
        })
        .collect();
    let mut idx: Vec<usize> = (0..out.len()).collect();
    idx.sort_by(|&a, &b| out[b].mean_return.total_cmp(&out[a].mean_return));
    for (rank, i) in idx.into_iter().enumerate() {
        out[i].rank = rank + 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub env: String,
    pub episode: usize,
    pub episode_return: f64,
    pub normalized_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: PathBuf,
    pub episodes: usize,
    pub target_mean: f64,
    pub target_std: f64,
    pub target_normalized: Option<f64>,
    pub source_mean: f64,
    pub source_std: f64,
}

/// A policy from either a SAC or a bare policy checkpoint.
pub fn load_policy(path: &Path) -> CliResult<GaussianPolicy> {
    if !path.exists() {
        return Err(CliError::Missing {
            what: "policy checkpoint".into(),
            path: path.to_path_buf(),
        });
    }
    match Sac::load(path) {
        Ok(sac) => Ok(sac.policy),
        Err(bdgxrl::Error::Format(_)) => Ok(GaussianPolicy::load(path)?),
        Err(e) => Err(e.into()),
    }
}

/// Deterministic evaluation in both environments; writes `report.json`
/// and `episodes.csv` under `out`.
pub fn evaluate(cfg: &ExperimentConfig, checkpoint: &Path, episodes: usize, out: &Path) -> CliResult<EvalSummary> {
    let policy = load_policy(checkpoint)?;
    let target = cfg.target_spec();
    if policy.state_dim() != target.state_dim() || policy.action_dim() != target.action_dim() {
        return Err(CliError::Config(format!(
            "checkpoint dims (state {}, action {}) do not match {:?} (state {}, action {})",
            policy.state_dim(),
            policy.action_dim(),
            cfg.env,
            target.state_dim(),
            target.action_dim()
        )));
    }
    let refs_path = cfg.out_dir.join(paths::REFERENCES);
    let refs: Option<References> = if refs_path.exists() { Some(read_json(&refs_path)?) } else { None };
    let det = DeterministicPolicy(&policy);
    let eval_on = |spec: &EnvSpec| evaluate_policy(&det, spec, episodes, &mut Rng::seed_from(cfg.agent.eval_seed));
    let t = eval_on(&target)?;
    let s = eval_on(&cfg.source_spec())?;
    let norm = |r: f64| -> CliResult<Option<f64>> {
        Ok(match &refs {
            Some(x) => Some(x.returns().normalize(r)?),
            None => None,
        })
    };
    let mut rows = Vec::new();
    for (env, rep, normalize) in [("target", &t, true), ("source", &s, false)] {
        for (i, &r) in rep.returns.iter().enumerate() {
            rows.push(EpisodeRow {
                env: env.into(),
                episode: i,
                episode_return: r,
                normalized_score: if normalize { norm(r)? } else { None },
            });
        }
    }
    let summary = EvalSummary {
        checkpoint: checkpoint.to_path_buf(),
        episodes,
        target_mean: t.mean,
        target_std: t.std,
        target_normalized: norm(t.mean)?,
        source_mean: s.mean,
        source_std: s.std,
    };
    write_csv(&out.join("episodes.csv"), &rows)?;
    write_json(&out.join("report.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimReport {
    pub dim: usize,
    pub translated_mean: Option<f64>,
    pub translated_std: Option<f64>,
    pub reference_mean: Option<f64>,
    pub reference_std: Option<f64>,
    pub ks: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslateReport {
    pub direction: Direction,
    pub count: usize,
    pub dims: Vec<DimReport>,
}

/// Translate every transition of `dataset` and compare next-state marginals
/// against `reference`.
pub fn translate(
    bridge_path: &Path,
    dataset: &Path,
    direction: Direction,
    reference: Option<&Path>,
    output: &Path,
    seed: u64,
) -> CliResult<TranslateReport> {
    if !bridge_path.exists() {
        return Err(CliError::Missing {
            what: "bridge checkpoint".into(),
            path: bridge_path.to_path_buf(),
        });
    }
    let bridge = Bridge::load(bridge_path)?;
    let ds = Dataset::load(dataset)?;
    if ds.layout() != bridge.layout {
        return Err(bdgxrl::Error::NormalizerMismatch(format!(
            "bridge expects {:?}, dataset has {:?}",
            bridge.layout,
            ds.layout()
        ))
        .into());
    }
    if ds.is_empty() {
        log::warn!("{} is empty; writing an empty translation", dataset.display());
    }
    let mut rng = Rng::seed_from(seed);
    let out = bridge.translate_dataset(&ds, direction, &mut rng)?;
    mkparent(output)?;
    out.save(output)?;
    let reference = match reference {
        Some(p) => Some(Dataset::load(p)?),
        None => None,
    };
    let report = marginal_report(&out, reference.as_ref(), direction);
    let report_path = output.with_extension("report.json");
    write_json(&report_path, &report)?;
    Ok(report)
}

pub fn marginal_report(translated: &Dataset, reference: Option<&Dataset>, direction: Direction) -> TranslateReport {
    let d = translated.layout().state_dim;
    let tn = translated.next_states();
    let rn = reference.map(|r| r.next_states());
    let dims = (0..d)
        .map(|j| {
            let col = stats::column(tn.data(), d, j);
            let refcol = rn.as_ref().map(|r| stats::column(r.data(), d, j));
            DimReport {
                dim: j,
                translated_mean: (!col.is_empty()).then(|| stats::mean(&col)),
                translated_std: (!col.is_empty()).then(|| stats::std(&col)),
                reference_mean: refcol.as_ref().map(|c| stats::mean(c)),
                reference_std: refcol.as_ref().map(|c| stats::std(c)),
                ks: refcol
                    .as_ref()
                    .filter(|c| !c.is_empty() && !col.is_empty())
                    .map(|c| stats::ks_statistic(&col, c)),
            }
        })
        .collect();
    TranslateReport {
        direction,
        count: translated.len(),
        dims,
    }
}
