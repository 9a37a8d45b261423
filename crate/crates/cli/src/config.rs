use std::path::{Path, PathBuf};

use bdgxrl::agent::AgentConfig;
use bdgxrl::bridge::BridgeConfig;
use bdgxrl::envsim::{EnvId, EnvSpec, PhysicsKnobs};
use bdgxrl::reward::RewardConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub no_il: bool,
    pub no_rm: bool,
    pub no_alignment: bool,
}

impl AblationFlags {
    pub const VARIANTS: [(&'static str, AblationFlags); 4] = [
        ("full", AblationFlags::new(false, false, false)),
        ("no_il", AblationFlags::new(true, false, false)),
        ("no_rm", AblationFlags::new(false, true, false)),
        ("no_alignment", AblationFlags::new(false, false, true)),
    ];

    pub const fn new(no_il: bool, no_rm: bool, no_alignment: bool) -> Self {
        Self {
            no_il,
            no_rm,
            no_alignment,
        }
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.no_il {
            parts.push("no_il");
        }
        if self.no_rm {
            parts.push("no_rm");
        }
        if self.no_alignment {
            parts.push("no_alignment");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoTier {
    Early,
    Mid,
    Final,
}

/// The target-trained SAC used for demonstrations and the expert reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub steps: usize,
    pub early_step: usize,
    pub mid_step: usize,
    pub demo_tier: DemoTier,
    /// Sample demo actions from the policy instead of taking its mean.
    pub stochastic_demos: bool,
    pub agent: AgentConfig,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            early_step: 10_000,
            mid_step: 30_000,
            demo_tier: DemoTier::Mid,
            stochastic_demos: true,
            agent: AgentConfig {
                imitation_weight: 0.0,
                bc_pretrain_steps: 0,
                ..AgentConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub source_knobs: PhysicsKnobs,
    pub target_knobs: PhysicsKnobs,
    /// Size of the random-policy source dataset.
    pub source_transitions: usize,
    /// Size of the reward-free target demo dataset.
    pub target_transitions: usize,
    pub expert: ExpertConfig,
    pub bridge: BridgeConfig,
    pub reward: RewardConfig,
    pub agent: AgentConfig,
    /// Online environment steps per policy run.
    pub budget_steps: usize,
    pub ablation: AblationFlags,
    pub seed: u64,
    /// Online seeds used by `ablate`.
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub reference_episodes: usize,
    /// Also run the naive source-SAC and BC-only baselines in `ablate`.
    pub baselines: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvId::Pointmass,
            source_knobs: PhysicsKnobs {
                gravity_scale: 0.5,
                ..PhysicsKnobs::CANONICAL
            },
            target_knobs: PhysicsKnobs::CANONICAL,
            source_transitions: 10_000,
            target_transitions: 20_000,
            expert: ExpertConfig::default(),
            bridge: BridgeConfig::default(),
            reward: RewardConfig::default(),
            agent: AgentConfig::default(),
            budget_steps: 100_000,
            ablation: AblationFlags::default(),
            seed: 0,
            seeds: vec![0, 1, 2],
            eval_episodes: 10,
            reference_episodes: 20,
            baselines: true,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(format!("writing {}", path.display()), e))
    }

    pub fn validate(&self) -> CliResult<()> {
        let wrap = |e: bdgxrl::Error| CliError::Config(e.to_string());
        self.source_spec().validate().map_err(wrap)?;
        self.target_spec().validate().map_err(wrap)?;
        self.bridge.validate().map_err(wrap)?;
        self.agent.validate().map_err(wrap)?;
        self.expert.agent.validate().map_err(wrap)?;
        if self.source_transitions == 0 {
            return Err(CliError::Config("source_transitions must be >= 1".into()));
        }
        if self.target_transitions == 0 {
            return Err(CliError::Config("target_transitions must be >= 1".into()));
        }
        if self.budget_steps == 0 || self.expert.steps == 0 {
            return Err(CliError::Config("budget_steps and expert.steps must be >= 1".into()));
        }
        if self.eval_episodes == 0 || self.reference_episodes == 0 {
            return Err(CliError::Config("eval_episodes and reference_episodes must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must be nonempty".into()));
        }
        Ok(())
    }

    pub fn source_spec(&self) -> EnvSpec {
        EnvSpec::new(self.env, self.source_knobs)
    }

    pub fn target_spec(&self) -> EnvSpec {
        EnvSpec::new(self.env, self.target_knobs)
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }

    /// Hash of the config sections a phase depends on.
    pub fn fingerprint(&self, phase: Phase) -> String {
        let collect = serde_json::json!({
            "env": self.env,
            "source_knobs": self.source_knobs,
            "target_knobs": self.target_knobs,
            "source_transitions": self.source_transitions,
            "target_transitions": self.target_transitions,
            "expert": self.expert,
            "reference_episodes": self.reference_episodes,
            "seed": self.seed,
        });
        let value = match phase {
            Phase::Collect => collect,
            Phase::Bridge => serde_json::json!({"collect": collect, "bridge": self.bridge}),
            Phase::Reward => serde_json::json!({"collect": collect, "reward": self.reward}),
            Phase::Policy => serde_json::json!({
                "collect": collect,
                "bridge": self.bridge,
                "reward": self.reward,
                "agent": self.agent,
                "budget_steps": self.budget_steps,
                "eval_episodes": self.eval_episodes,
            }),
        };
        hex(&Sha256::digest(serde_json::to_vec(&value).expect("config serializes")))
    }

    /// Agent settings for one variant: `no_il` disables BC pretraining and
    /// forces the imitation weight to zero.
    pub fn agent_for(&self, flags: AblationFlags) -> AgentConfig {
        let mut a = self.agent.clone();
        a.eval_episodes = self.eval_episodes;
        if flags.no_il {
            a.imitation_weight = 0.0;
            a.bc_pretrain_steps = 0;
        }
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Collect,
    Bridge,
    Reward,
    Policy,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 7, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn flags_do_not_change_offline_fingerprints() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.ablation.no_il = true;
        b.budget_steps = 5;
        assert_eq!(a.fingerprint(Phase::Collect), b.fingerprint(Phase::Collect));
        assert_eq!(a.fingerprint(Phase::Bridge), b.fingerprint(Phase::Bridge));
        assert_ne!(a.fingerprint(Phase::Policy), b.fingerprint(Phase::Policy));
    }

    #[test]
    fn no_il_zeroes_imitation() {
        let cfg = ExperimentConfig::default();
        let a = cfg.agent_for(AblationFlags::new(true, false, false));
        assert_eq!(a.imitation_weight, 0.0);
        assert_eq!(a.bc_pretrain_steps, 0);
        assert_eq!(AblationFlags::new(true, true, false).name(), "no_il+no_rm");
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
