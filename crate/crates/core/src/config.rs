//! TOML run configuration shared by the CLI and the sweep runner.
//!
//! Every section is optional and falls back to the library defaults. Unknown
//! keys are rejected, and the error message names the key.
//!
//! ```toml
//! [dataset]
//! kind = "blobs"
//! dim = 32
//! classes = 4
//!
//! [attack]
//! budget = 200000
//! batch_size = 128
//! directions = 10
//!
//! [pd]
//! lambda = 10.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::baselines::{JbdaConfig, SurrogateConfig};
use crate::data::{DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::oracle::TargetSpec;
use crate::pd::PdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Maze,
    MazePd,
    /// The data-free loop driven by the target's exact input gradient.
    MazeWhitebox,
    Jbda,
    Noise,
    Surrogate,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::Maze,
        AttackKind::MazePd,
        AttackKind::MazeWhitebox,
        AttackKind::Jbda,
        AttackKind::Noise,
        AttackKind::Surrogate,
    ];

    pub fn id(self) -> &'static str {
        match self {
            AttackKind::Maze => "maze",
            AttackKind::MazePd => "maze-pd",
            AttackKind::MazeWhitebox => "maze-whitebox",
            AttackKind::Jbda => "jbda",
            AttackKind::Noise => "noise",
            AttackKind::Surrogate => "surrogate",
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = AttackKind::ALL.iter().map(|k| k.id()).collect();
                Error::Config(format!(
                    "unknown attack `{s}`, expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

fn default_surrogate_data() -> DatasetSpec {
    DatasetSpec {
        kind: DatasetKind::ShiftedBlobs,
        n_train: 1000,
        seed: 1,
        ..DatasetSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// The target's training distribution. Its seed also seeds the target.
    pub dataset: DatasetSpec,
    pub target: TargetSpec,
    /// Budget, batch size and the data-free loop. `attack.seed` is the run
    /// seed for every attack kind.
    pub attack: AttackConfig,
    pub pd: PdConfig,
    pub jbda: JbdaConfig,
    pub surrogate: SurrogateConfig,
    /// Inputs labelled by the surrogate attack.
    pub surrogate_data: DatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            target: TargetSpec::default(),
            attack: AttackConfig::default(),
            pd: PdConfig::default(),
            jbda: JbdaConfig::default(),
            surrogate: SurrogateConfig::default(),
            surrogate_data: default_surrogate_data(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Checks every section; messages are prefixed with the section name.
    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) | Error::Invalid(m) => Error::Config(format!("[{name}] {m}")),
                other => other,
            })
        };
        section("attack", self.attack.validate())?;
        section("pd", self.pd.validate())?;
        if self.dataset.n_train == 0 || self.dataset.n_test == 0 {
            return Err(Error::Config(
                "[dataset] n_train and n_test must be positive".into(),
            ));
        }
        if self.target.epochs == 0 || self.target.batch_size == 0 {
            return Err(Error::Config(
                "[target] epochs and batch_size must be positive".into(),
            ));
        }
        if self.jbda.n_seeds == 0 || self.jbda.batch_size == 0 {
            return Err(Error::Config(
                "[jbda] n_seeds and batch_size must be positive".into(),
            ));
        }
        if self.surrogate.batch_size == 0 {
            return Err(Error::Config(
                "[surrogate] batch_size must be positive".into(),
            ));
        }
        if self.surrogate_data.dim != self.dataset.dim {
            return Err(Error::Config(format!(
                "[surrogate_data] dim is {}, the target expects {}",
                self.surrogate_data.dim, self.dataset.dim
            )));
        }
        Ok(())
    }

    /// Copy with the run seed applied to every attack section.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.attack.seed = seed;
        c.jbda.seed = seed;
        c.surrogate.seed = seed;
        c
    }

    pub fn seed(&self) -> u64 {
        self.attack.seed
    }

    /// First 16 hex digits of the SHA-256 of the attack name and the TOML
    /// form with the run seed cleared, so repeats of one run share a hash.
    pub fn config_hash(&self, kind: AttackKind) -> Result<String> {
        let text = format!("attack = \"{kind}\"\n{}", self.with_seed(0).to_toml()?);
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.attack.budget = 4096;
        c.pd.lambda = 2.5;
        c.dataset.kind = DatasetKind::Rings;
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[attack]\nbudgett = 5\n").unwrap_err();
        assert!(err.to_string().contains("budgett"), "{err}");
        let err = RunConfig::from_toml("[nonsense]\n").unwrap_err();
        assert!(err.to_string().contains("nonsense"), "{err}");
    }

    #[test]
    fn bad_type_is_named() {
        let err = RunConfig::from_toml("[attack]\nbudget = \"lots\"\n").unwrap_err();
        assert!(err.to_string().contains("budget"), "{err}");
    }

    #[test]
    fn invalid_value_names_section() {
        let err = RunConfig::from_toml("[attack]\nbatch_size = 0\n").unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("[attack]") && msg.contains("batch_size"),
            "{msg}"
        );
    }

    #[test]
    fn hash_ignores_seed_only() {
        let k = AttackKind::Maze;
        let a = RunConfig::default();
        let h = a.config_hash(k).unwrap();
        assert_eq!(h, a.with_seed(7).config_hash(k).unwrap());
        let mut b = a.clone();
        b.attack.budget += 1;
        assert_ne!(h, b.config_hash(k).unwrap());
        assert_ne!(h, a.config_hash(AttackKind::Noise).unwrap());
        assert_eq!(h.len(), 16);
    }

    #[test]
    fn attack_kind_parses() {
        for k in AttackKind::ALL {
            assert_eq!(k.id().parse::<AttackKind>().unwrap(), k);
        }
        assert!("mazer".parse::<AttackKind>().is_err());
    }
}
