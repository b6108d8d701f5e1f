//! Training configuration: every hyperparameter of a run, its TOML
//! (de)serialization, `--set key=value` overrides and field-by-field
//! validation. The canonical snapshot written back into a run directory is
//! sufficient to reproduce the run bit-exactly in the same precision mode.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::flow::NormMode;
use crate::nets::Activation;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Gridworld,
    PointReach,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Sparse,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKindCfg {
    Gaussian,
    Flow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Fixed,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormModeCfg {
    None,
    Clip,
    Tanh,
    NoS,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunCfg {
    pub seed: u64,
    pub total_steps: u64,
    /// Checkpoint every K updates (and always at the end).
    pub checkpoint_interval: u64,
}

impl Default for RunCfg {
    fn default() -> Self {
        RunCfg {
            seed: 1,
            total_steps: 200_000,
            checkpoint_interval: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvCfg {
    pub kind: EnvKind,
    /// Gridworld layout: a builtin name (`two_goal`), a `.map` file path, or
    /// inline map text (any value containing a newline).
    pub layout: String,
    /// Reward mode of the point-reach environment.
    pub reward: RewardMode,
    pub num_envs: usize,
}

impl Default for EnvCfg {
    fn default() -> Self {
        EnvCfg {
            kind: EnvKind::Gridworld,
            layout: "two_goal".into(),
            reward: RewardMode::Sparse,
            num_envs: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyCfg {
    pub kind: PolicyKindCfg,
    /// Coupling layer count (flow only). Three or more are needed for every
    /// action dimension to influence every other.
    pub layers: usize,
    /// Hidden dims of each scale/translation net (flow) or the mean net
    /// (Gaussian).
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for PolicyCfg {
    fn default() -> Self {
        PolicyCfg {
            kind: PolicyKindCfg::Flow,
            layers: 4,
            hidden: vec![64, 64],
            activation: Activation::Elu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoCfg {
    pub gamma: f64,
    pub lam: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub value_coef: f64,
    pub grad_clip: f64,
    /// Entropy bonus coefficient. Unset resolves per policy kind: 1e-3 for
    /// the Gaussian, 0 for the flow.
    pub entropy_coef: Option<f64>,
    /// Rollout length T per environment.
    pub step_len: usize,
    pub lr: f64,
    pub desired_kl: f64,
    pub lr_schedule: LrSchedule,
    pub norm_mode: NormModeCfg,
    /// Scale bound for `clip`/`tanh` normalization.
    pub l: f64,
    /// Update-time action noise std σ_n (ablation; 0 disables).
    pub action_noise: f64,
    /// Sampling temperature during training.
    pub temperature: f64,
}

impl Default for PpoCfg {
    fn default() -> Self {
        PpoCfg {
            gamma: 0.99,
            lam: 0.95,
            clip_eps: 0.2,
            epochs: 5,
            minibatches: 4,
            value_coef: 1.0,
            grad_clip: 1.0,
            entropy_coef: None,
            step_len: 24,
            lr: 1e-3,
            desired_kl: 1e-2,
            lr_schedule: LrSchedule::Adaptive,
            norm_mode: NormModeCfg::Tanh,
            l: 0.5,
            action_noise: 0.0,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticCfg {
    pub hidden: Vec<usize>,
}

impl Default for CriticCfg {
    fn default() -> Self {
        CriticCfg {
            hidden: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetryCfg {
    /// Emit `probe.jsonl` rows with per-layer gradient-factor magnitudes.
    pub probe: bool,
    /// Sample budget per probe (gradient norms are costly per sample).
    pub probe_samples: usize,
}

impl Default for TelemetryCfg {
    fn default() -> Self {
        TelemetryCfg {
            probe: false,
            probe_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCfg {
    pub episodes: usize,
    pub temperature: f64,
    /// Pin the initial state (and target, for point-reach) across episodes.
    /// Unset resolves per env kind: fixed for the gridworld mode-coverage
    /// protocol, randomized for point-reach success evaluation.
    pub fixed_start: Option<bool>,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            episodes: 100,
            temperature: 1.0,
            fixed_start: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub run: RunCfg,
    pub env: EnvCfg,
    pub policy: PolicyCfg,
    pub ppo: PpoCfg,
    pub critic: CriticCfg,
    pub telemetry: TelemetryCfg,
    pub eval: EvalCfg,
}

fn cfg_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl TrainConfig {
    /// Check every invariant, naming the failing field.
    pub fn validate(&self) -> Result<()> {
        let p = &self.ppo;
        if !(p.clip_eps > 0.0 && p.clip_eps < 1.0) {
            return Err(cfg_err("ppo.clip_eps", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&p.gamma) {
            return Err(cfg_err("ppo.gamma", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&p.lam) {
            return Err(cfg_err("ppo.lam", "must lie in [0, 1]"));
        }
        if p.epochs == 0 {
            return Err(cfg_err("ppo.epochs", "must be >= 1"));
        }
        if p.minibatches == 0 {
            return Err(cfg_err("ppo.minibatches", "must be >= 1"));
        }
        if p.step_len == 0 {
            return Err(cfg_err("ppo.step_len", "must be >= 1"));
        }
        if p.lr <= 0.0 {
            return Err(cfg_err("ppo.lr", "must be > 0"));
        }
        if p.desired_kl <= 0.0 {
            return Err(cfg_err("ppo.desired_kl", "must be > 0"));
        }
        if p.l <= 0.0 && matches!(p.norm_mode, NormModeCfg::Clip | NormModeCfg::Tanh) {
            return Err(cfg_err("ppo.l", "scale bound must be > 0 for clip/tanh"));
        }
        if p.action_noise < 0.0 {
            return Err(cfg_err("ppo.action_noise", "must be >= 0"));
        }
        if p.temperature < 0.0 {
            return Err(cfg_err("ppo.temperature", "must be >= 0"));
        }
        if p.grad_clip <= 0.0 {
            return Err(cfg_err("ppo.grad_clip", "must be > 0"));
        }
        if p.value_coef < 0.0 {
            return Err(cfg_err("ppo.value_coef", "must be >= 0"));
        }
        if let Some(e) = p.entropy_coef {
            if e < 0.0 {
                return Err(cfg_err("ppo.entropy_coef", "must be >= 0"));
            }
        }
        if self.env.num_envs == 0 {
            return Err(cfg_err("env.num_envs", "must be >= 1"));
        }
        if self.policy.layers == 0 && self.policy.kind == PolicyKindCfg::Flow {
            return Err(cfg_err("policy.layers", "must be >= 1 (3+ recommended)"));
        }
        if self.policy.hidden.is_empty() || self.policy.hidden.contains(&0) {
            return Err(cfg_err("policy.hidden", "dims must be non-empty and >= 1"));
        }
        if self.critic.hidden.is_empty() || self.critic.hidden.contains(&0) {
            return Err(cfg_err("critic.hidden", "dims must be non-empty and >= 1"));
        }
        if self.run.total_steps == 0 {
            return Err(cfg_err("run.total_steps", "must be >= 1"));
        }
        if self.run.checkpoint_interval == 0 {
            return Err(cfg_err("run.checkpoint_interval", "must be >= 1"));
        }
        if self.eval.episodes == 0 {
            return Err(cfg_err("eval.episodes", "must be >= 1"));
        }
        if self.eval.temperature < 0.0 {
            return Err(cfg_err("eval.temperature", "must be >= 0"));
        }
        if self.telemetry.probe_samples == 0 {
            return Err(cfg_err("telemetry.probe_samples", "must be >= 1"));
        }
        Ok(())
    }

    /// Entropy coefficient with the per-policy default applied: 1e-3 for the
    /// Gaussian baseline, 0 for the flow.
    pub fn entropy_coef(&self) -> f64 {
        self.ppo.entropy_coef.unwrap_or(match self.policy.kind {
            PolicyKindCfg::Gaussian => 1e-3,
            PolicyKindCfg::Flow => 0.0,
        })
    }

    /// Scale normalization with its bound.
    pub fn norm_mode(&self) -> NormMode {
        match self.ppo.norm_mode {
            NormModeCfg::None => NormMode::None,
            NormModeCfg::Clip => NormMode::Clip { l: self.ppo.l },
            NormModeCfg::Tanh => NormMode::Tanh { l: self.ppo.l },
            NormModeCfg::NoS => NormMode::NoS,
        }
    }

    /// Environment steps consumed by one update.
    pub fn steps_per_update(&self) -> u64 {
        (self.env.num_envs * self.ppo.step_len) as u64
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: "config".into(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Canonical, diffable snapshot.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Load a config file (or defaults when absent) and apply dotted-path
    /// overrides, e.g. `("ppo.norm_mode", "none")`. Unknown keys are
    /// rejected through the schema; invariants are checked afterwards.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::Config {
                    field: p.display().to_string(),
                    message: e.to_string(),
                })?
            }
            None => toml::Value::Table(Default::default()),
        };
        for (key, raw) in overrides {
            set_path(&mut value, key, parse_literal(raw))?;
        }
        let cfg: TrainConfig = value.try_into().map_err(|e| Error::Config {
            field: "config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse an override literal: TOML value syntax first (numbers, booleans,
/// arrays), bare word falls back to a string.
fn parse_literal(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    if let Ok(table) = toml::from_str::<toml::value::Table>(&probe) {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn set_path(root: &mut toml::Value, path: &str, new: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config {
            field: path.into(),
            message: "empty path segment in --set key".into(),
        });
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config {
            field: path.into(),
            message: format!("{part} is not a table"),
        })?;
        cur = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    let table = cur.as_table_mut().ok_or_else(|| Error::Config {
        field: path.into(),
        message: "parent is not a table".into(),
    })?;
    table.insert(parts[parts.len() - 1].to_string(), new);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn snapshot_roundtrips() {
        let cfg = TrainConfig::default();
        let text = cfg.to_canonical_toml();
        let back = TrainConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        // Canonical means serializing again is identical.
        assert_eq!(text, back.to_canonical_toml());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = TrainConfig::load(
            None,
            &[
                ("ppo.norm_mode".into(), "none".into()),
                ("ppo.lr".into(), "0.0005".into()),
                ("policy.kind".into(), "gaussian".into()),
                ("policy.hidden".into(), "[32, 32]".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.ppo.norm_mode, NormModeCfg::None);
        assert_eq!(cfg.ppo.lr, 0.0005);
        assert_eq!(cfg.policy.kind, PolicyKindCfg::Gaussian);
        assert_eq!(cfg.policy.hidden, vec![32, 32]);
    }

    #[test]
    fn negative_l_rejected_with_field_name() {
        let err = TrainConfig::load(None, &[("ppo.l".into(), "-1".into())]).unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "ppo.l"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let err = TrainConfig::load(None, &[("ppo.banana".into(), "1".into())]).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn entropy_default_depends_on_policy_kind() {
        let mut cfg = TrainConfig::default();
        cfg.policy.kind = PolicyKindCfg::Flow;
        assert_eq!(cfg.entropy_coef(), 0.0);
        cfg.policy.kind = PolicyKindCfg::Gaussian;
        assert_eq!(cfg.entropy_coef(), 1e-3);
        cfg.ppo.entropy_coef = Some(0.02);
        assert_eq!(cfg.entropy_coef(), 0.02);
    }
}
