use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flmlab::trainer::{ProbeConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// One experiment: a training config, probe settings and an output directory.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl ExperimentFile {
    /// Reads and validates `path`; the label defaults to the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut exp: ExperimentFile =
            serde_json::from_str(&text).with_context(|| format!("invalid experiment file {}", path.display()))?;
        exp.train = exp.train.resolved().with_context(|| format!("invalid config in {}", path.display()))?;
        if exp.label.is_none() {
            exp.label = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        if exp.label.as_deref().is_some_and(|l| l.is_empty() || l.contains([',', '/', '\\'])) {
            bail!("label must be non-empty and free of ',', '/' and '\\'");
        }
        Ok(exp)
    }

    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or("run")
    }

    /// Writes the resolved experiment, defaults included, to `dir/experiment.json`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("experiment.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["flm", "mlm", "ar", "prefixlm"] {
            let exp = ExperimentFile::load(&dir.join(format!("{name}.json"))).unwrap();
            assert_eq!(exp.label(), name);
            assert_eq!(exp.train.objective.name(), name);
            assert_eq!(exp.train.steps, 300);
        }
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let exp = ExperimentFile { label: Some("x".into()), ..ExperimentFile::default() };
        exp.echo(dir.path()).unwrap();
        let back = ExperimentFile::load(&dir.path().join("experiment.json")).unwrap();
        assert_eq!(back.label(), "x");
        assert_eq!(back.probe, exp.probe);
        assert_eq!(serde_json::to_value(&back.train).unwrap(), serde_json::to_value(exp.train.resolved().unwrap()).unwrap());
    }
}
