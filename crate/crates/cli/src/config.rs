//! Experiment configuration files and the hashes that key artifacts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gist_core::data::{validate_tasks, SplitSpec, TaskSpec};
use gist_core::gist::GistLossConfig;
use gist_core::peft::PeftSpec;
use gist_core::trainer::OptimSpec;
use gist_core::vit::BackboneConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(CliError::Validation(format!(
                "unknown precision {other:?}, expected f32 or f64"
            ))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Fine-tuning framework.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// CLS cross entropy only, no Gist token.
    Traditional,
    Gist,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Traditional => "traditional",
            Mode::Gist => "gist",
        }
    }
}

/// Source-task pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    /// Trained as one union task; `backbone.num_classes` must equal the
    /// summed class counts.
    pub tasks: Vec<TaskSpec>,
    pub split: SplitSpec,
    pub optim: OptimSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub peft: Vec<PeftSpec>,
    /// Loss settings of GIST mode.
    pub gist: GistLossConfig,
    pub optim: OptimSpec,
    /// Downstream tasks, each fine-tuned separately.
    pub tasks: Vec<TaskSpec>,
    pub split: SplitSpec,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let v = |r: gist_core::Result<()>, what: &str| r.map_err(|e| CliError::Validation(format!("{what}: {e}")));
        v(self.backbone.validate(), "backbone")?;
        v(validate_tasks(&self.pretrain.tasks), "pretrain.tasks")?;
        v(self.pretrain.optim.validate(), "pretrain.optim")?;
        let source_k: usize = self.pretrain.tasks.iter().map(|t| t.num_classes).sum();
        if source_k != self.backbone.num_classes {
            return Err(CliError::Validation(format!(
                "backbone.num_classes is {} but the pretraining tasks have {source_k} classes",
                self.backbone.num_classes
            )));
        }
        for (i, spec) in self.peft.iter().enumerate() {
            v(spec.validate(), &format!("peft[{i}]"))?;
        }
        v(self.gist.validate(), "gist")?;
        v(self.optim.validate(), "optim")?;
        if self.tasks.is_empty() {
            return Err(CliError::Validation("tasks must not be empty".into()));
        }
        for (i, task) in self.tasks.iter().enumerate() {
            v(task.validate(), &format!("tasks[{i}]"))?;
            self.check_geometry(task, &format!("tasks[{i}]"))?;
        }
        for task in &self.pretrain.tasks {
            self.check_geometry(task, "pretrain.tasks")?;
        }
        if self.modes.is_empty() {
            return Err(CliError::Validation("modes must not be empty".into()));
        }
        let gist_listed = self.modes.contains(&Mode::Gist);
        if gist_listed != self.gist.enabled {
            return Err(CliError::Validation(format!(
                "gist.enabled is {} but modes {} GIST",
                self.gist.enabled,
                if gist_listed { "list" } else { "do not list" }
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Validation("seeds must not be empty".into()));
        }
        Ok(())
    }

    fn check_geometry(&self, task: &TaskSpec, what: &str) -> CliResult<()> {
        if task.image_side != self.backbone.image_side || task.channels != self.backbone.channels {
            return Err(CliError::Validation(format!(
                "{what}: images are {}x{}x{}, backbone expects {}x{}x{}",
                task.channels,
                task.image_side,
                task.image_side,
                self.backbone.channels,
                self.backbone.image_side,
                self.backbone.image_side
            )));
        }
        Ok(())
    }

    /// Identity of the whole experiment; the output directory is excluded.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        hash_value(&value)
    }

    /// Identity of the pretrained backbone.
    pub fn pretrain_hash(&self) -> String {
        hash_json(&(&self.backbone, &self.pretrain, self.precision))
    }

    /// Loss settings a mode actually trains with.
    pub fn mode_loss(&self, mode: Mode) -> GistLossConfig {
        match mode {
            Mode::Gist => self.gist.clone(),
            Mode::Traditional => GistLossConfig {
                aux_vpt_loss: self.gist.aux_vpt_loss,
                ..GistLossConfig::disabled()
            },
        }
    }

    /// Identity of one fine-tuning run.
    pub fn run_hash(&self, task: &TaskSpec, mode: Mode, seed: u64) -> String {
        hash_json(&RunKey {
            pretrain_hash: self.pretrain_hash(),
            peft: &self.peft,
            loss: self.mode_loss(mode),
            optim: &self.optim,
            task,
            split: &self.split,
            seed,
            precision: self.precision,
        })
    }
}

#[derive(Serialize)]
struct RunKey<'a> {
    pretrain_hash: String,
    peft: &'a [PeftSpec],
    loss: GistLossConfig,
    optim: &'a OptimSpec,
    task: &'a TaskSpec,
    split: &'a SplitSpec,
    seed: u64,
    precision: Precision,
}

/// SHA-256 of the canonical (sorted-key, compact) JSON form.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    hash_value(&serde_json::to_value(value).expect("hash input serializes"))
}

fn hash_value(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(value).expect("value serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Short form used in directory names.
pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Comma-separated seed list.
pub fn parse_seeds(list: &str) -> CliResult<Vec<u64>> {
    let seeds: Vec<u64> = list
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("bad seed {s:?} in --seeds")))
        })
        .collect::<CliResult<_>>()?;
    if seeds.is_empty() {
        return Err(CliError::Validation("--seeds is empty".into()));
    }
    Ok(seeds)
}

/// Directory name of a downstream task: position, generator and class count.
pub fn task_label(index: usize, task: &TaskSpec) -> String {
    format!("{index}-{}-k{}", task.kind.name().to_lowercase(), task.num_classes)
}
