use std::path::Path;

use serde::{Deserialize, Serialize};
use softpush::diffsim::SimConfig;
use softpush::evalbench::EvalConfig;
use softpush::gmp::GmpConfig;
use softpush::mppi::MppiConfig;
use softpush::policy::PolicyConfig;
use softpush::provenance::{hash_bytes, substream};
use softpush::scene::SceneConfig;
use softpush::train::{BcConfig, CollectConfig, PpoConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Goals sampled for demonstrations and PPO episodes.
    pub n_goals: usize,
    pub collect: CollectConfig,
    pub bc: BcConfig,
    pub ppo: PpoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_goals: 20,
            collect: CollectConfig::default(),
            bc: BcConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

/// Every section seed is replaced by a substream of `seed` on resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub scene: SceneConfig,
    pub gmp: GmpConfig,
    pub mppi: MppiConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// Applies the root seed override and derives every section seed.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        let root = self.seed;
        self.gmp.seed = substream(root, "gmp");
        self.mppi.seed = substream(root, "mppi");
        self.train.collect.seed = substream(root, "collect");
        self.train.bc.seed = substream(root, "bc");
        self.train.ppo.seed = substream(root, "ppo");
        self.eval.seed = substream(root, "eval");
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.sim.validate()?;
        self.scene.validate()?;
        self.gmp.validate()?;
        self.mppi.validate()?;
        self.policy.validate()?;
        self.train.bc.validate()?;
        self.train.ppo.validate()?;
        if self.eval.n_goals == 0 {
            return Err(CliError::Config("eval.n_goals must be >= 1".into()));
        }
        if self.eval.n_robots == 0 || self.train.collect.n_robots == 0 {
            return Err(CliError::Config("robot counts must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML of the resolved configuration.
    pub fn hash(&self) -> String {
        hash_bytes(self.to_toml().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_losslessly() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), c.to_toml());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[sim]\nfrictoin = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("frictoin"), "{err}");
        assert!(RunConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = RunConfig::parse("seed = 4\n[sim]\nfriction = 2.0\n[gmp.coeffs]\nmass = 10.0\n").unwrap();
        assert_eq!(c.sim.friction, 2.0);
        assert_eq!(c.sim.grid_res, SimConfig::default().grid_res);
        assert_eq!(c.gmp.coeffs.mass, 10.0);
        assert_eq!(c.gmp.coeffs.dist, 500.0);
    }

    #[test]
    fn resolution_derives_distinct_seeds() {
        let c = RunConfig::default().resolve(Some(9)).unwrap();
        assert_eq!(c.seed, 9);
        assert_ne!(c.gmp.seed, c.mppi.seed);
        assert_eq!(c, RunConfig::default().resolve(Some(9)).unwrap());
        assert_ne!(c.hash(), RunConfig::default().resolve(Some(10)).unwrap().hash());
    }
}
