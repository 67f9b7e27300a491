//! Training configuration.
//!
//! Stored as TOML with one table per section. Values are resolved in three
//! layers: the file, then `CIA_<SECTION>_<KEY>` environment variables, then
//! explicit `section.key = value` overrides (command-line flags).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixer::MixerKind;

/// What the CIA machinery does during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiaMode {
    /// Plain value decomposition.
    Off,
    /// Identity-wise contrastive loss.
    Cia,
    /// Credit-classification ablation.
    Cc,
    /// Random-shuffle diagnostic: agent values are permuted before mixing.
    Rs,
}

impl std::str::FromStr for CiaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "cia" => Ok(Self::Cia),
            "cc" => Ok(Self::Cc),
            "rs" => Ok(Self::Rs),
            other => Err(Error::Config(format!("unknown mode {other}"))),
        }
    }
}

impl std::fmt::Display for CiaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::Cia => "cia",
            Self::Cc => "cc",
            Self::Rs => "rs",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub total_env_steps: usize,
    pub mixer: MixerKind,
    pub mode: CiaMode,
    /// Weight of the contrastive loss.
    pub alpha: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            total_env_steps: 200_000,
            mixer: MixerKind::Qmix,
            mode: CiaMode::Off,
            alpha: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    pub gamma: f64,
    /// Episodes per training batch.
    pub batch_size: usize,
    /// Replay capacity in episodes.
    pub buffer_capacity: usize,
    /// Gradient steps between target-network copies.
    pub target_update_interval: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: usize,
    /// Pick target actions with the online network (double Q-learning).
    pub double_q: bool,
}

impl Default for RlSection {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 32,
            buffer_capacity: 5000,
            target_update_interval: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            double_q: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    /// RMSprop smoothing constant.
    pub smoothing: f64,
    pub eps: f64,
    pub grad_norm_clip: f64,
    /// Fixed number of batch shards whose gradients are computed
    /// independently and summed in order.
    pub grad_shards: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            smoothing: 0.99,
            eps: 1e-5,
            grad_norm_clip: 10.0,
            grad_shards: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub hidden: usize,
    pub mixing_embed: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            hidden: 64,
            mixing_embed: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogSection {
    /// Env steps between greedy evaluations (0 disables).
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Env steps between checkpoints (0 disables periodic checkpoints).
    pub checkpoint_interval: usize,
}

impl Default for LogSection {
    fn default() -> Self {
        Self {
            eval_interval: 10_000,
            eval_episodes: 20,
            checkpoint_interval: 50_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub run: RunSection,
    pub rl: RlSection,
    pub optim: OptimSection,
    pub net: NetSection,
    pub log: LogSection,
}

const SECTIONS: [&str; 5] = ["run", "rl", "optim", "net", "log"];

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolves file text, environment variables and overrides, in that order.
    pub fn resolve<I>(file_text: Option<&str>, env: I, overrides: &[(String, String)]) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = match file_text {
            Some(text) => text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?,
            None => toml::Table::new(),
        };
        let mut env_pairs: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix("CIA_")?.to_ascii_lowercase();
                let section = SECTIONS.iter().find(|s| rest.starts_with(&format!("{s}_")))?;
                let key = &rest[section.len() + 1..];
                Some((format!("{section}.{key}"), v))
            })
            .collect();
        env_pairs.sort();
        for (path, value) in env_pairs.iter().chain(overrides) {
            set_path(&mut table, path, value)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.rl.gamma) {
            return bad(format!("rl.gamma must be in [0, 1), got {}", self.rl.gamma));
        }
        if self.rl.epsilon_end > self.rl.epsilon_start {
            return bad("rl.epsilon_end must not exceed rl.epsilon_start".into());
        }
        if !(0.0..=1.0).contains(&self.rl.epsilon_start) || self.rl.epsilon_end < 0.0 {
            return bad("epsilon values must lie in [0, 1]".into());
        }
        if self.rl.batch_size == 0 || self.rl.buffer_capacity < self.rl.batch_size {
            return bad("rl.batch_size must be >= 1 and <= rl.buffer_capacity".into());
        }
        if self.rl.target_update_interval == 0 {
            return bad("rl.target_update_interval must be >= 1".into());
        }
        if self.run.alpha < 0.0 || !self.run.alpha.is_finite() {
            return bad(format!("run.alpha must be >= 0, got {}", self.run.alpha));
        }
        if self.optim.lr <= 0.0 || self.optim.eps <= 0.0 || !(0.0..1.0).contains(&self.optim.smoothing) {
            return bad("optim.lr and optim.eps must be > 0, optim.smoothing in [0, 1)".into());
        }
        if self.optim.grad_shards == 0 {
            return bad("optim.grad_shards must be >= 1".into());
        }
        if self.net.hidden == 0 || self.net.mixing_embed == 0 {
            return bad("network widths must be >= 1".into());
        }
        Ok(())
    }
}

fn set_path(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let (section, key) = path
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("override {path} must look like section.key")))?;
    if !SECTIONS.contains(&section) {
        return Err(Error::Config(format!("unknown field `{section}`")));
    }
    // Bare words (e.g. `qmix`) are taken as strings.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("`{section}` is not a table"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.rl.batch_size, 32);
        assert_eq!(c.rl.buffer_capacity, 5000);
        assert_eq!(c.rl.target_update_interval, 200);
        assert_eq!(c.rl.gamma, 0.99);
        assert_eq!(c.optim.lr, 5e-4);
        assert_eq!(c.optim.smoothing, 0.99);
        assert_eq!((c.rl.epsilon_start, c.rl.epsilon_end), (1.0, 0.05));
        assert_eq!(c.rl.epsilon_anneal_steps, 50_000);
        assert_eq!(c.run.alpha, 0.02);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_toml_str("[rl]\nbatch_sise = 3\n").unwrap_err();
        assert!(err.to_string().contains("batch_sise"), "{err}");
        let err = TrainConfig::from_toml_str("[nope]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
    }

    #[test]
    fn layering_order() {
        let file = "[run]\nseed = 3\nalpha = 0.5\n[rl]\ngamma = 0.9\n";
        let env = vec![
            ("CIA_RUN_SEED".to_string(), "7".to_string()),
            ("CIA_RUN_MODE".to_string(), "cia".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let flags = vec![("run.seed".to_string(), "11".to_string())];
        let c = TrainConfig::resolve(Some(file), env, &flags).unwrap();
        assert_eq!(c.run.seed, 11);
        assert_eq!(c.run.mode, CiaMode::Cia);
        assert_eq!(c.run.alpha, 0.5);
        assert_eq!(c.rl.gamma, 0.9);
        let mut expected = TrainConfig::default();
        expected.run.seed = 11;
        expected.run.mode = CiaMode::Cia;
        expected.run.alpha = 0.5;
        expected.rl.gamma = 0.9;
        assert_eq!(c, expected);
    }

    #[test]
    fn toml_round_trip() {
        let mut c = TrainConfig::default();
        c.run.mode = CiaMode::Rs;
        c.run.mixer = MixerKind::Vdn;
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(TrainConfig::from_toml_str("[rl]\ngamma = 1.0\n").is_err());
        assert!(TrainConfig::from_toml_str("[rl]\nepsilon_end = 1.0\nepsilon_start = 0.5\n").is_err());
        assert!(TrainConfig::from_toml_str("[run]\nalpha = -0.1\n").is_err());
    }
}
