//! Pretraining and fine-tuning commands and their on-disk layout.
//!
//! ```text
//! <out>/pretrain-<hash>/       checkpoint.gst, metrics.jsonl, record.json,
//!                              source-test.gstdata, config.json, summary.json
//! <out>/runs/<run hash>/       checkpoint.gst, metrics.jsonl, record.json, run.json
//! <out>/finetune-<hash>/       summary.json, summary.txt, config.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use gist_core::data::{make_splits, write_dataset, Splits, TaskSpec};
use gist_core::peft::{trainable_parameter_count, TrainableCount};
use gist_core::tensor::Scalar;
use gist_core::trainer::{self, prepare_finetune, TrainRecord};
use gist_core::vit::{load_checkpoint, save_checkpoint, Vit};
use serde::{Deserialize, Serialize};

use crate::config::{short, task_label, ExperimentConfig, Mode, Precision};
use crate::error::{CliError, CliResult};
use crate::report::{mean_std, Stats};

pub const CHECKPOINT_FILE: &str = "checkpoint.gst";
pub const SOURCE_TEST_FILE: &str = "source-test.gstdata";

pub fn pretrain_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(format!("pretrain-{}", short(&cfg.pretrain_hash())))
}

pub fn finetune_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(format!("finetune-{}", short(&cfg.hash())))
}

pub fn run_dir(cfg: &ExperimentConfig, run_hash: &str) -> PathBuf {
    cfg.output_dir.join("runs").join(&run_hash[..16])
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub pretrain_hash: String,
    pub seed: u64,
    pub source_classes: usize,
    pub final_train_acc: f64,
    pub test_acc: f64,
    pub checkpoint: PathBuf,
}

/// Trains the backbone on the union of the source tasks and writes its
/// checkpoint, metrics and source test set.
pub fn pretrain(cfg: &ExperimentConfig) -> CliResult<PretrainSummary> {
    match cfg.precision {
        Precision::F32 => pretrain_as::<f32>(cfg),
        Precision::F64 => pretrain_as::<f64>(cfg),
    }
}

fn pretrain_as<F: Scalar>(cfg: &ExperimentConfig) -> CliResult<PretrainSummary> {
    let hash = cfg.pretrain_hash();
    let dir = pretrain_dir(cfg);
    fs::create_dir_all(&dir)?;
    let p = &cfg.pretrain;
    let splits = make_splits(&p.tasks, &p.split)?;
    let mut model = Vit::<F>::new(cfg.backbone.clone(), p.seed)?;
    let record = trainer::pretrain(&mut model, &splits, &p.optim, p.seed, &hash)?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    write(&checkpoint, save_checkpoint(&model, Some(&hash))?)?;
    write_dataset(&dir.join(SOURCE_TEST_FILE), &splits.test, &p.tasks, Some(&hash))?;
    write(&dir.join("metrics.jsonl"), record.metrics_jsonl())?;
    write(&dir.join("record.json"), to_json(&record))?;
    write(&dir.join("config.json"), cfg.to_json())?;
    let summary = PretrainSummary {
        pretrain_hash: hash,
        seed: p.seed,
        source_classes: cfg.backbone.num_classes,
        final_train_acc: record.epochs.last().map_or(0.0, |e| e.train_acc),
        test_acc: record.test_acc,
        checkpoint,
    };
    write(&dir.join("summary.json"), to_json(&summary))?;
    Ok(summary)
}

/// Loads the pretrained backbone of `cfg` and checks it was produced by
/// the same pretraining settings.
pub fn load_pretrained<F: Scalar>(cfg: &ExperimentConfig) -> CliResult<Vit<F>> {
    let path = pretrain_dir(cfg).join(CHECKPOINT_FILE);
    let bytes = fs::read(&path).map_err(|e| {
        CliError::Runtime(format!(
            "pretrained checkpoint {} not readable ({e}); run `gistlab pretrain` with this config first",
            path.display()
        ))
    })?;
    let (model, meta) =
        load_checkpoint::<F>(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    meta.verify_config_hash(&cfg.pretrain_hash())
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if !meta.peft.is_empty() || meta.gist_len.is_some() {
        return Err(CliError::Runtime(format!(
            "{} is not a bare pretrained backbone",
            path.display()
        )));
    }
    Ok(model)
}

/// Result of one (task, mode, seed) fine-tuning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub task: String,
    pub mode: Mode,
    pub seed: u64,
    pub run_hash: String,
    pub test_acc: f64,
    pub final_train_acc: f64,
    pub trainable: TrainableCount,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    #[serde(flatten)]
    pub stats: Stats,
    pub trainable: TrainableCount,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub spec: TaskSpec,
    pub modes: Vec<ModeSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverallStats {
    pub mode: Mode,
    #[serde(flatten)]
    pub stats: Stats,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub config_hash: String,
    pub pretrain_hash: String,
    pub precision: Precision,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskSummary>,
    /// Over every (task, seed) cell.
    pub overall: Vec<OverallStats>,
}

impl FinetuneSummary {
    pub fn overall(&self, mode: Mode) -> Option<&Stats> {
        self.overall.iter().find(|o| o.mode == mode).map(|o| &o.stats)
    }

    pub fn runs(&self, mode: Mode) -> impl Iterator<Item = &RunResult> {
        self.tasks
            .iter()
            .flat_map(|t| &t.modes)
            .filter(move |m| m.mode == mode)
            .flat_map(|m| &m.runs)
    }
}

/// Fine-tunes every (task, mode, seed) and writes the summary. Runs whose
/// hashed directory already holds a matching record are reused.
pub fn finetune(cfg: &ExperimentConfig) -> CliResult<FinetuneSummary> {
    match cfg.precision {
        Precision::F32 => finetune_as::<f32>(cfg),
        Precision::F64 => finetune_as::<f64>(cfg),
    }
}

fn finetune_as<F: Scalar>(cfg: &ExperimentConfig) -> CliResult<FinetuneSummary> {
    let pretrained = load_pretrained::<F>(cfg)?;
    let mut tasks = Vec::with_capacity(cfg.tasks.len());
    for (index, task) in cfg.tasks.iter().enumerate() {
        let label = task_label(index, task);
        let splits = make_splits(std::slice::from_ref(task), &cfg.split)?;
        let mut modes = Vec::with_capacity(cfg.modes.len());
        for &mode in &cfg.modes {
            let runs = cfg
                .seeds
                .iter()
                .map(|&seed| run_cached(cfg, &pretrained, &label, task, &splits, mode, seed))
                .collect::<CliResult<Vec<_>>>()?;
            let accs: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
            modes.push(ModeSummary {
                mode,
                stats: mean_std(&accs),
                trainable: runs[0].trainable,
                runs,
            });
        }
        tasks.push(TaskSummary {
            task: label,
            spec: task.clone(),
            modes,
        });
    }
    let overall = cfg
        .modes
        .iter()
        .map(|&mode| {
            let accs: Vec<f64> = tasks
                .iter()
                .flat_map(|t| &t.modes)
                .filter(|m| m.mode == mode)
                .flat_map(|m| m.runs.iter().map(|r| r.test_acc))
                .collect();
            OverallStats {
                mode,
                stats: mean_std(&accs),
            }
        })
        .collect();
    let summary = FinetuneSummary {
        config_hash: cfg.hash(),
        pretrain_hash: cfg.pretrain_hash(),
        precision: cfg.precision,
        seeds: cfg.seeds.clone(),
        tasks,
        overall,
    };
    let dir = finetune_dir(cfg);
    fs::create_dir_all(&dir)?;
    write(&dir.join("config.json"), cfg.to_json())?;
    write(&dir.join("summary.json"), to_json(&summary))?;
    write(&dir.join("summary.txt"), crate::report::finetune_table(&summary))?;
    Ok(summary)
}

fn cached(dir: &Path, run_hash: &str) -> Option<RunResult> {
    let text = fs::read_to_string(dir.join("run.json")).ok()?;
    let result: RunResult = serde_json::from_str(&text).ok()?;
    (result.run_hash == run_hash && dir.join("record.json").exists()).then_some(result)
}

fn run_cached<F: Scalar>(
    cfg: &ExperimentConfig,
    pretrained: &Vit<F>,
    label: &str,
    task: &TaskSpec,
    splits: &Splits,
    mode: Mode,
    seed: u64,
) -> CliResult<RunResult> {
    let run_hash = cfg.run_hash(task, mode, seed);
    let dir = run_dir(cfg, &run_hash);
    if let Some(result) = cached(&dir, &run_hash) {
        return Ok(RunResult {
            task: label.to_string(),
            ..result
        });
    }
    let (model, record) = train_one(cfg, pretrained, task, splits, mode, seed, &run_hash)?;
    fs::create_dir_all(&dir)?;
    let result = RunResult {
        task: label.to_string(),
        mode,
        seed,
        run_hash: run_hash.clone(),
        test_acc: record.test_acc,
        final_train_acc: record.epochs.last().map_or(0.0, |e| e.train_acc),
        trainable: trainable_parameter_count(&model),
    };
    write(&dir.join(CHECKPOINT_FILE), save_checkpoint(&model, Some(&run_hash))?)?;
    write(&dir.join("metrics.jsonl"), record.metrics_jsonl())?;
    write(&dir.join("record.json"), to_json(&record))?;
    write(&dir.join("run.json"), to_json(&result))?;
    Ok(result)
}

/// One fine-tuning run from the pretrained backbone, nothing written.
pub fn train_one<F: Scalar>(
    cfg: &ExperimentConfig,
    pretrained: &Vit<F>,
    task: &TaskSpec,
    splits: &Splits,
    mode: Mode,
    seed: u64,
    run_hash: &str,
) -> CliResult<(Vit<F>, TrainRecord)> {
    let loss = cfg.mode_loss(mode);
    let mut model = pretrained.clone();
    prepare_finetune(&mut model, task.num_classes, &cfg.peft, &loss, seed)?;
    let record = trainer::finetune(&mut model, &loss, splits, &cfg.optim, seed, run_hash)?;
    Ok((model, record))
}
