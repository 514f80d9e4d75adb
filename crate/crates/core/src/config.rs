//! Run configuration, stored as TOML under a `[padloc]` table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureProviderConfig, ProviderKind};
use crate::losses::{LossWeights, MmoSource};
use crate::matching::{DiversityMetric, MatchingMode};

pub const SEED_ENV: &str = "PADLOC_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSettings {
    pub kind: ProviderKind,
    /// Neighborhood radius in meters.
    pub radius: f64,
    pub normalize: bool,
    pub include_xyz: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        let d = FeatureProviderConfig::default();
        Self {
            kind: d.kind,
            radius: d.radius,
            normalize: d.normalize,
            include_xyz: d.include_xyz,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Keypoints sampled per scan.
    pub keypoints: usize,
    pub feature_dim: usize,
    pub descriptor_dim: usize,
    pub clusters: usize,
    pub heads: usize,
    /// Scans excluded before each query.
    pub window: usize,
    /// Ground-truth loop radius in meters.
    pub radius: f64,
    pub metric: DiversityMetric,
    pub mode: MatchingMode,
    /// Evaluate the reverse direction and average it with the forward one.
    pub reverse: bool,
    pub mmo_source: MmoSource,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matching_weights: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub descriptor_weights: Option<PathBuf>,
    pub features: FeatureSettings,
    pub loss_weights: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            keypoints: 4096,
            feature_dim: 640,
            descriptor_dim: 256,
            clusters: 64,
            heads: 4,
            window: 50,
            radius: 4.0,
            metric: DiversityMetric::BergerParker,
            mode: MatchingMode::PureAttention,
            reverse: true,
            mmo_source: MmoSource::ReverseHead,
            seed: 0,
            matching_weights: None,
            descriptor_weights: None,
            features: FeatureSettings::default(),
            loss_weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    padloc: RunConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.padloc.validate()?;
        Ok(file.padloc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&ConfigFile { padloc: self.clone() }).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Applies `PADLOC_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("keypoints", self.keypoints),
            ("descriptor_dim", self.descriptor_dim),
            ("clusters", self.clusters),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.feature_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide feature_dim ({})",
                self.heads, self.feature_dim
            )));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::Config(format!("radius {} must be > 0", self.radius)));
        }
        self.loss_weights.validate()?;
        let mut f = self.feature_config();
        // a weight file is only required once a provider is built
        f.weight_path.get_or_insert_with(PathBuf::new);
        f.validate()
    }

    pub fn feature_config(&self) -> FeatureProviderConfig {
        FeatureProviderConfig {
            kind: self.features.kind,
            radius: self.features.radius,
            dim: self.feature_dim,
            normalize: self.features.normalize,
            weight_path: self.features.weights.clone(),
            seed: self.seed,
            include_xyz: self.features.include_xyz,
        }
    }

    pub fn sampling_seed(&self) -> u64 {
        self.seed
    }

    pub fn matching_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn descriptor_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let c = RunConfig {
            metric: DiversityMetric::Hill(2.0),
            features: FeatureSettings {
                weights: Some("w.pdlc".into()),
                kind: ProviderKind::LoadedLinear,
                ..FeatureSettings::default()
            },
            ..RunConfig::default()
        };
        let text = c.to_toml();
        assert!(text.starts_with("[padloc]"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_toml("[padloc]\nkeypoints = 128\nmetric = \"shannon\"\n").unwrap();
        assert_eq!(c.keypoints, 128);
        assert_eq!(c.metric, DiversityMetric::Shannon);
        assert_eq!(c.window, 50);
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "[padloc]\nheads = 3\n",
            "[padloc]\nkeypoints = 0\n",
            "[padloc]\nradius = -1.0\n",
            "[padloc]\nmetric = \"gini\"\n",
            "[padloc]\nbogus = 1\n",
            "[padloc.loss_weights]\nw_mmo = -2.0\n",
            "[padloc]\nfeature_dim = 4\nheads = 1\n",
            "not toml",
        ] {
            let e = RunConfig::from_toml(text).unwrap_err();
            assert!(e.is_config_error(), "{text}: {e}");
        }
    }
}
