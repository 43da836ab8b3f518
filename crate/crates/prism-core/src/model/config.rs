//! Model hyperparameters and expert selection.

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Which expert modules participate in each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertFlags {
    pub atomistic: bool,
    pub similarity: bool,
    pub multiscale: bool,
    pub cell: bool,
}

impl ExpertFlags {
    pub fn all() -> Self {
        ExpertFlags {
            atomistic: true,
            similarity: true,
            multiscale: true,
            cell: true,
        }
    }

    pub fn atomistic_only() -> Self {
        ExpertFlags {
            atomistic: true,
            similarity: false,
            multiscale: false,
            cell: false,
        }
    }

    /// Parses a comma-separated list like `"atomistic,similarity,cell"`.
    pub fn parse(spec: &str) -> Result<Self, ModelError> {
        let mut flags = ExpertFlags {
            atomistic: false,
            similarity: false,
            multiscale: false,
            cell: false,
        };
        for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "atomistic" => flags.atomistic = true,
                "similarity" => flags.similarity = true,
                "multiscale" => flags.multiscale = true,
                "cell" => flags.cell = true,
                other => {
                    return Err(ModelError::InvalidConfig(format!(
                        "unknown expert '{other}'"
                    )))
                }
            }
        }
        Ok(flags)
    }

    pub fn to_spec(&self) -> String {
        let mut names = Vec::new();
        if self.atomistic {
            names.push("atomistic");
        }
        if self.similarity {
            names.push("similarity");
        }
        if self.multiscale {
            names.push("multiscale");
        }
        if self.cell {
            names.push("cell");
        }
        names.join(",")
    }
}

/// Coordinate handling during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentationPolicy {
    None,
    RandomRotation,
}

impl AugmentationPolicy {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "none" => Ok(AugmentationPolicy::None),
            "random-rotation" => Ok(AugmentationPolicy::RandomRotation),
            other => Err(ModelError::InvalidConfig(format!(
                "unknown augmentation policy '{other}'"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentationPolicy::None => "none",
            AugmentationPolicy::RandomRotation => "random-rotation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Radius of the atomistic neighbourhood graph (Angstrom).
    pub atomistic_cutoff: f64,
    /// Radius of the superatom replica graph; must exceed `atomistic_cutoff`.
    pub cell_cutoff: f64,
    /// Feature-space cutoff for the similarity graph (embedding units).
    pub feature_cutoff: f64,
    /// Out-degree cap of the similarity graph.
    pub max_degree: usize,
    pub layers: usize,
    /// Embedding width.
    pub dim: usize,
    /// Number of Gaussian radial-basis centers per edge encoder.
    pub rbf_size: usize,
    /// Concatenate the unit direction to the radial basis. Off by default;
    /// distance-only features keep the readout rotation invariant.
    pub direction_features: bool,
    pub experts: ExpertFlags,
    pub augmentation: AugmentationPolicy,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            atomistic_cutoff: 4.0,
            cell_cutoff: 14.0,
            feature_cutoff: 1.0,
            max_degree: 8,
            layers: 2,
            dim: 32,
            rbf_size: 16,
            direction_features: false,
            experts: ExpertFlags::all(),
            augmentation: AugmentationPolicy::None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.atomistic_cutoff > 0.0) {
            return Err(ModelError::InvalidConfig(
                "atomistic cutoff must be positive".into(),
            ));
        }
        if !(self.feature_cutoff > 0.0) {
            return Err(ModelError::InvalidConfig(
                "feature cutoff must be positive".into(),
            ));
        }
        if self.cell_cutoff <= self.atomistic_cutoff {
            return Err(ModelError::InvalidConfig(
                "cell cutoff must exceed the atomistic cutoff".into(),
            ));
        }
        if self.layers == 0 {
            return Err(ModelError::InvalidConfig("layers must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(ModelError::InvalidConfig("dim must be >= 1".into()));
        }
        if self.rbf_size < 2 {
            return Err(ModelError::InvalidConfig("rbf_size must be >= 2".into()));
        }
        if self.max_degree == 0 {
            return Err(ModelError::InvalidConfig("max_degree must be >= 1".into()));
        }
        let f = &self.experts;
        if !(f.atomistic || f.similarity || f.multiscale) {
            return Err(ModelError::InvalidConfig(
                "at least one atom-level expert must be enabled".into(),
            ));
        }
        Ok(())
    }

    /// Width of the raw edge-feature vector fed to the edge encoders.
    pub fn edge_input_width(&self) -> usize {
        self.rbf_size + if self.direction_features { 3 } else { 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn cell_cutoff_must_dominate() {
        let cfg = ModelConfig {
            cell_cutoff: 3.0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn expert_flags_roundtrip() {
        let flags = ExpertFlags::parse("atomistic, cell").unwrap();
        assert!(flags.atomistic && flags.cell);
        assert!(!flags.similarity && !flags.multiscale);
        assert_eq!(flags.to_spec(), "atomistic,cell");
        assert!(ExpertFlags::parse("bogus").is_err());
    }

    #[test]
    fn augmentation_parse() {
        assert_eq!(
            AugmentationPolicy::parse("none").unwrap(),
            AugmentationPolicy::None
        );
        assert_eq!(
            AugmentationPolicy::parse("random-rotation").unwrap(),
            AugmentationPolicy::RandomRotation
        );
        assert!(AugmentationPolicy::parse("flip").is_err());
    }
}
