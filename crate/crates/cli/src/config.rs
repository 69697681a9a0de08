//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sigvae::data::{gen_sprites, load_idx, Dataset, Split};
use sigvae::{Error, EvalSettings, Result, SampleMode, SharingScheme, SpriteConfig, TrainConfig};

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Sprites(SpriteConfig),
    Idx(IdxSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Sprites(SpriteConfig::default())
    }
}

/// IDX image files. Without test files the last tenth of the training file
/// is held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mi_samples: usize,
    pub stderr_batch: Option<usize>,
    pub stderr_trials: usize,
    /// Images in the sample grid.
    pub samples: usize,
    /// Test images shown with their reconstructions.
    pub reconstructions: usize,
    pub grid_columns: usize,
    pub sample_mode: SampleMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = EvalSettings::default();
        EvalConfig {
            mi_samples: s.mi_samples,
            stderr_batch: s.stderr_batch,
            stderr_trials: s.stderr_trials,
            samples: 64,
            reconstructions: 8,
            grid_columns: 8,
            sample_mode: SampleMode::Mean,
        }
    }
}

impl EvalConfig {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            mi_samples: self.mi_samples,
            stderr_batch: self.stderr_batch,
            stderr_trials: self.stderr_trials,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    pub schemes: Vec<SharingScheme>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            betas: vec![0.01, 0.1, 1.0, 10.0],
            schemes: vec![SharingScheme::shared(), SharingScheme::per_image(), SharingScheme::per_pixel()],
        }
    }
}

/// Everything a command needs. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSource,
    pub out: Option<PathBuf>,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    /// Fill the `wall_ms` column. Off by default so reruns stay
    /// byte-identical.
    pub record_wall_time: bool,
}

/// Train and test images.
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        if let DataSource::Sprites(s) = &self.data {
            s.validate()?;
        }
        let spec = self.train.decoder_spec()?;
        spec.validate()?;
        self.train.objective.validate(&spec)?;
        if self.eval.grid_columns == 0 {
            return Err(Error::Config("eval.grid_columns must be positive".into()));
        }
        if self.eval.mi_samples < 2 {
            return Err(Error::Config("eval.mi_samples must be at least 2".into()));
        }
        if self.eval.stderr_batch.is_some() && self.eval.stderr_trials < 30 {
            return Err(Error::Config("eval.stderr_trials must be at least 30".into()));
        }
        if let Some(b) = self.sweep.betas.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::Config(format!("sweep beta {b} must be positive")));
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<Splits> {
        match &self.data {
            DataSource::Sprites(cfg) => {
                let set = gen_sprites(cfg)?;
                Ok(Splits {
                    train: set.train(),
                    test: set.test(),
                })
            }
            DataSource::Idx(src) => {
                let all = load_idx(&src.images, src.labels.as_deref())?;
                match &src.test_images {
                    Some(t) => {
                        let test = load_idx(t, src.test_labels.as_deref())?;
                        Ok(Splits {
                            train: all.subset(&(0..all.len()).collect::<Vec<_>>(), Split::Train),
                            test: test.subset(&(0..test.len()).collect::<Vec<_>>(), Split::Test),
                        })
                    }
                    None => {
                        let cut = all.len() - all.len() / 10;
                        Ok(Splits {
                            train: all.subset(&(0..cut).collect::<Vec<_>>(), Split::Train),
                            test: all.subset(&(cut..all.len()).collect::<Vec<_>>(), Split::Test),
                        })
                    }
                }
            }
        }
    }
}
