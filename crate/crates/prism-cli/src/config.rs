//! Flat `key = value` run configuration covering every training knob plus
//! the input/output paths. Unknown keys are rejected; `#` starts a comment.

use std::collections::BTreeSet;
use std::path::PathBuf;

use prism_core::model::{AugmentationPolicy, ExpertFlags};
use prism_core::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub data: PathBuf,
    pub out_dir: PathBuf,
}

const KNOWN_KEYS: &[&str] = &[
    "data",
    "out_dir",
    "learning_rate",
    "epochs",
    "batch_size",
    "seed",
    "huber_delta",
    "val_fraction",
    "r_c",
    "R_c",
    "r_f",
    "max_degree",
    "layers",
    "dim",
    "rbf_size",
    "direction_features",
    "experts",
    "augmentation",
];

pub fn parse_run_config(text: &str) -> Result<RunSpec, String> {
    let mut train = TrainConfig::default();
    let mut data: Option<PathBuf> = None;
    let mut out_dir: Option<PathBuf> = None;
    let mut seen = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {line_no}: expected 'key = value'"))?;
        let key = key.trim();
        let value = value.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(format!("line {line_no}: unknown key '{key}'"));
        }
        if !seen.insert(key.to_string()) {
            return Err(format!("line {line_no}: duplicate key '{key}'"));
        }
        let bad = |what: &str| format!("line {line_no}: invalid {what} '{value}' for '{key}'");
        match key {
            "data" => data = Some(PathBuf::from(value)),
            "out_dir" => out_dir = Some(PathBuf::from(value)),
            "learning_rate" => train.learning_rate = value.parse().map_err(|_| bad("number"))?,
            "epochs" => train.epochs = value.parse().map_err(|_| bad("integer"))?,
            "batch_size" => train.batch_size = value.parse().map_err(|_| bad("integer"))?,
            "seed" => {
                let seed: u64 = value.parse().map_err(|_| bad("integer"))?;
                train.seed = seed;
                train.model.seed = seed;
            }
            "huber_delta" => train.huber_delta = value.parse().map_err(|_| bad("number"))?,
            "val_fraction" => train.val_fraction = value.parse().map_err(|_| bad("number"))?,
            "r_c" => train.model.atomistic_cutoff = value.parse().map_err(|_| bad("number"))?,
            "R_c" => train.model.cell_cutoff = value.parse().map_err(|_| bad("number"))?,
            "r_f" => train.model.feature_cutoff = value.parse().map_err(|_| bad("number"))?,
            "max_degree" => train.model.max_degree = value.parse().map_err(|_| bad("integer"))?,
            "layers" => train.model.layers = value.parse().map_err(|_| bad("integer"))?,
            "dim" => train.model.dim = value.parse().map_err(|_| bad("integer"))?,
            "rbf_size" => train.model.rbf_size = value.parse().map_err(|_| bad("integer"))?,
            "direction_features" => {
                train.model.direction_features = value.parse().map_err(|_| bad("boolean"))?
            }
            "experts" => {
                train.model.experts = ExpertFlags::parse(value).map_err(|e| format!("line {line_no}: {e}"))?
            }
            "augmentation" => {
                train.model.augmentation =
                    AugmentationPolicy::parse(value).map_err(|e| format!("line {line_no}: {e}"))?
            }
            _ => unreachable!("key list checked above"),
        }
    }

    let data = data.ok_or("missing required key 'data'")?;
    let out_dir = out_dir.ok_or("missing required key 'out_dir'")?;
    train.validate().map_err(|e| e.to_string())?;
    Ok(RunSpec {
        train,
        data,
        out_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let text = "\
# training run
data = train.jsonl
out_dir = runs/a
learning_rate = 0.005
epochs = 3
batch_size = 8
seed = 42
r_c = 4.0
R_c = 14.0   # cell radius
r_f = 1.0
max_degree = 8
layers = 2
dim = 16
experts = atomistic,similarity,multiscale,cell
augmentation = none
direction_features = false
";
        let spec = parse_run_config(text).unwrap();
        assert_eq!(spec.train.epochs, 3);
        assert_eq!(spec.train.seed, 42);
        assert_eq!(spec.train.model.seed, 42);
        assert_eq!(spec.train.model.dim, 16);
        assert_eq!(spec.data, PathBuf::from("train.jsonl"));
    }

    #[test]
    fn rejects_unknown_key() {
        let err = parse_run_config("data=a\nout_dir=b\nbogus=1\n").unwrap_err();
        assert!(err.contains("unknown key 'bogus'"), "{err}");
    }

    #[test]
    fn rejects_duplicate_and_missing() {
        assert!(parse_run_config("data=a\ndata=b\nout_dir=c\n")
            .unwrap_err()
            .contains("duplicate"));
        assert!(parse_run_config("out_dir=c\n")
            .unwrap_err()
            .contains("missing required key 'data'"));
    }

    #[test]
    fn validates_cutoffs() {
        let err = parse_run_config("data=a\nout_dir=b\nr_c = 5.0\nR_c = 4.0\n").unwrap_err();
        assert!(err.contains("cell cutoff"), "{err}");
    }
}
