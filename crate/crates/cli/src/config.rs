//! TOML run configuration. Relative paths resolve against the directory of
//! the config file (or the working directory when no file is given).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use jtss_core::audio::AugmentConfig;
use jtss_core::backbones::EncoderConfig;
use jtss_core::evaluation::DcfParams;
use jtss_core::synth::SynthSpec;
use jtss_core::teacher::{TeacherSource, DEFAULT_TEACHER_DIM};
use jtss_core::trainer::{TrainConfig, TrainSetup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Synthetic,
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub dim: usize,
    /// Seed of the synthetic teacher, also used by `extract-teacher`.
    pub seed: u64,
    /// Directory of `<utt_id>.jtsf` files for `kind = "files"`.
    pub dir: PathBuf,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Synthetic,
            dim: DEFAULT_TEACHER_DIM,
            seed: 0,
            dir: "teacher".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSet {
    pub name: String,
    pub manifest: PathBuf,
    pub trials: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    /// Utterances whose embeddings form the AS-norm cohort.
    pub cohort_manifest: Option<PathBuf>,
    pub eval: Vec<EvalSet>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let set = |name: &str| EvalSet {
            name: name.into(),
            manifest: format!("corpus/eval_{name}.jsonl").into(),
            trials: format!("corpus/trials_{name}.txt").into(),
        };
        Self {
            train_manifest: "corpus/train_clean.jsonl".into(),
            cohort_manifest: Some("corpus/train.jsonl".into()),
            eval: vec![set("clean"), set("farfield")],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Apply AS-norm when a cohort manifest is configured.
    pub asnorm: bool,
    pub top_k: usize,
    pub dcf: DcfParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            asnorm: true,
            top_k: 50,
            dcf: DcfParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory for corpus generation (`gen-data`).
    pub corpus_dir: PathBuf,
    /// Directory for training and evaluation artifacts.
    pub output_dir: PathBuf,
    pub synth: SynthSpec,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub teacher: TeacherConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_dir: "corpus".into(),
            output_dir: "runs/default".into(),
            synth: SynthSpec::default(),
            data: DataConfig::default(),
            encoder: EncoderConfig::ecapa(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            teacher: TeacherConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// A parsed config plus the directory its relative paths refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.setup().validate()?;
        self.eval.dcf.validate()?;
        self.synth.validate()?;
        if self.eval.top_k < 2 {
            bail!("eval.top_k must be at least 2");
        }
        if self.teacher.dim == 0 {
            bail!("teacher.dim must be at least 1");
        }
        Ok(())
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            encoder: self.encoder.clone(),
            train: self.train.clone(),
            augment: self.augment.clone(),
        }
    }
}

impl LoadedConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                let config = RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?;
                let base_dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Ok(Self { config, base_dir })
            }
            None => Ok(Self {
                config: RunConfig::default(),
                base_dir: PathBuf::new(),
            }),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() || self.base_dir.as_os_str().is_empty() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Teacher source for training; `None` when the teacher branch is off.
    pub fn teacher_source(&self) -> Option<TeacherSource> {
        if self.config.train.lambda == 0.0 {
            return None;
        }
        let t = &self.config.teacher;
        Some(match t.kind {
            TeacherKind::Synthetic => TeacherSource::Synthetic {
                seed: t.seed,
                dim: t.dim,
            },
            TeacherKind::Files => TeacherSource::FileBacked {
                root: self.resolve(&t.dir),
                dim: t.dim,
            },
        })
    }
}
