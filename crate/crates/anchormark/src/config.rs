//! Run configuration: a TOML file with {data, backbone, loss, train, embed}
//! sections, overridden by CLI flags (flags win, then environment, then the
//! file, then defaults). Every run writes a resolved snapshot next to its
//! outputs.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// `synth:<n>` or an image directory.
    pub source: Option<String>,
    /// Captions file (Flickr8k token format); defaults to
    /// `<dir>/captions.txt` for directory sources.
    pub captions: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSection {
    pub name: String,
    pub dim: Option<usize>,
    pub seed: u64,
    pub weights: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            name: "stub".into(),
            dim: None,
            seed: 0,
            weights: None,
            tokenizer: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pipeline_seed: u64,
    pub max_steps: Option<u64>,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub dropout: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 1,
            batch_size: 64,
            learning_rate: 1e-4,
            pipeline_seed: 0,
            max_steps: None,
            proj_hidden: 2048,
            proj_out: 4096,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedSection {
    pub lambda_w: f64,
    pub mu_margin: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub target_psnr_db: f64,
}

impl Default for EmbedSection {
    fn default() -> Self {
        EmbedSection {
            lambda_w: 1.0,
            mu_margin: 0.1,
            iterations: 100,
            step_size: 1e-2,
            target_psnr_db: 40.0,
        }
    }
}

/// Merged view of everything a run needs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub backbone: BackboneSection,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub embed: EmbedSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Write the resolved snapshot (includes a wall-clock stamp; snapshots
    /// are the one output exempt from byte-determinism).
    pub fn write_snapshot(&self, path: &Path, command: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Snapshot<'a> {
            command: &'a str,
            generated_at_unix: u64,
            #[serde(flatten)]
            config: &'a RunConfig,
        }
        let snap = Snapshot {
            command,
            generated_at_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config: self,
        };
        let text = toml::to_string_pretty(&snap)
            .map_err(|e| Error::Config(format!("snapshot serialize: {e}")))?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 9\n[backbone]\nname = \"stub\"\ndim = 256\n[train]\nepochs = 3\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.backbone.dim, Some(256));
        assert_eq!(cfg.train.epochs, 3);
        // untouched sections keep defaults
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.embed.iterations, 100);
        assert_eq!(cfg.loss.margin_m, 0.2);
    }

    #[test]
    fn snapshot_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out/run-config.toml");
        RunConfig::default().write_snapshot(&path, "train").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("command = \"train\""));
        assert!(text.contains("generated_at_unix"));
    }
}
