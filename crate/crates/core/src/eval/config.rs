//! Run configuration, read from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mapping::MappingConfig;
use crate::pgo::PgoConfig;
use crate::search::SearchConfig;
use crate::simulator::{DistortionConfig, LoopConfig, WorldConfig};
use crate::submap::PipelineConfig;

use super::metrics::Alignment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub alignment: Alignment,
    pub scale_window: usize,
    pub scale_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alignment: Alignment::Sim3,
            scale_window: 100,
            scale_stride: 5,
        }
    }
}

/// Module switches; everything is enabled by default.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub optimization: bool,
    pub pose_correction: bool,
    pub rotation_correction: bool,
    pub translation_correction: bool,
    pub scale_rectification: bool,
    pub local_suppression: bool,
    pub adaptive_fusion: bool,
    pub nonlinear_align: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            optimization: true,
            pose_correction: true,
            rotation_correction: true,
            translation_correction: true,
            scale_rectification: true,
            local_suppression: true,
            adaptive_fusion: true,
            nonlinear_align: true,
        }
    }
}

/// Named variants accepted by `--ablate`.
pub const ABLATIONS: [&str; 8] = [
    "wo-optimization",
    "wo-pose-correction",
    "wo-rotation-correction",
    "wo-translation-correction",
    "wo-scale-rectification",
    "wo-local-suppression",
    "wo-adaptive-fusion",
    "wo-nonlinear-align",
];

impl AblationConfig {
    /// Disables the module named by one of [`ABLATIONS`].
    pub fn disable(&mut self, name: &str) -> Result<(), ConfigError> {
        let flag = match name {
            "wo-optimization" => &mut self.optimization,
            "wo-pose-correction" => &mut self.pose_correction,
            "wo-rotation-correction" => &mut self.rotation_correction,
            "wo-translation-correction" => &mut self.translation_correction,
            "wo-scale-rectification" => &mut self.scale_rectification,
            "wo-local-suppression" => &mut self.local_suppression,
            "wo-adaptive-fusion" => &mut self.adaptive_fusion,
            "wo-nonlinear-align" => &mut self.nonlinear_align,
            other => return Err(ConfigError::UnknownAblation(other.to_string())),
        };
        *flag = false;
        Ok(())
    }

    /// Names of the disabled modules, in [`ABLATIONS`] order.
    pub fn disabled(&self) -> Vec<&'static str> {
        let flags = [
            self.optimization,
            self.pose_correction,
            self.rotation_correction,
            self.translation_correction,
            self.scale_rectification,
            self.local_suppression,
            self.adaptive_fusion,
            self.nonlinear_align,
        ];
        ABLATIONS.iter().zip(flags).filter(|(_, on)| !on).map(|(n, _)| *n).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown ablation '{0}'")]
    UnknownAblation(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub distortion: DistortionConfig,
    pub pipeline: PipelineConfig,
    pub search: SearchConfig,
    pub pgo: PgoConfig,
    pub mapping: MappingConfig,
    #[serde(rename = "loop")]
    pub loops: LoopConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.world.validate().map_err(|e| inv(e.to_string()))?;
        self.distortion.validate().map_err(|e| inv(e.to_string()))?;
        self.pipeline.validate().map_err(|e| inv(e.to_string()))?;
        self.mapping.validate().map_err(|e| inv(e.to_string()))?;
        if self.eval.scale_window < 2 || self.eval.scale_stride == 0 {
            return Err(inv("scale window must be ≥ 2 and stride ≥ 1".into()));
        }
        Ok(())
    }

    /// A configuration with every reconstruction error switched off.
    pub fn noiseless() -> Self {
        RunConfig {
            distortion: DistortionConfig::none(),
            ..RunConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        for section in ["[world]", "[distortion]", "[pipeline]", "[search]", "[pgo]", "[mapping]", "[loop]", "[eval]", "[ablation]"] {
            assert!(text.contains(section), "missing {section}");
        }
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("[world]\nframes = 120\nseed = 7\n[eval]\nalignment = \"se3\"\n").unwrap();
        assert_eq!(cfg.world.frames, 120);
        assert_eq!(cfg.world.seed, 7);
        assert_eq!(cfg.eval.alignment, Alignment::Se3);
        assert_eq!(cfg.mapping.grid, 24);
        assert_eq!(cfg.pipeline.n_max, 15);
    }

    #[test]
    fn typos_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[mapping]\ngird = 3\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml("[mapping]\ngrid = 0\n"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn ablation_names() {
        let mut a = AblationConfig::default();
        for n in ABLATIONS {
            a.disable(n).unwrap();
        }
        assert_eq!(a.disabled(), ABLATIONS.to_vec());
        assert!(a.disable("wo-everything").is_err());
    }
}
