//! Ablation grids. Every cell is a complete single-mode experiment config,
//! saved next to the table so it can be re-run with `finetune`.

use std::fmt;
use std::fs;
use std::str::FromStr;

use gist_core::gist::{GistLossConfig, Interaction};
use gist_core::peft::TrainableCount;
use serde::{Deserialize, Serialize};

use crate::config::{short, ExperimentConfig, Mode};
use crate::error::{CliError, CliResult};
use crate::report::Stats;
use crate::run;

pub const TOKEN_LENGTHS: [usize; 4] = [1, 10, 50, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Grid {
    TokenLen,
    LossTerms,
    Lambda,
    Interaction,
}

impl Grid {
    pub const ALL: [Grid; 4] = [Grid::TokenLen, Grid::LossTerms, Grid::Lambda, Grid::Interaction];

    pub fn name(self) -> &'static str {
        match self {
            Grid::TokenLen => "TOKEN_LEN",
            Grid::LossTerms => "LOSS_TERMS",
            Grid::Lambda => "LAMBDA",
            Grid::Interaction => "INTERACTION",
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Grid {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let upper = s.to_ascii_uppercase().replace('-', "_");
        Grid::ALL.into_iter().find(|g| g.name() == upper).ok_or_else(|| {
            let names: Vec<_> = Grid::ALL.iter().map(|g| g.name()).collect();
            CliError::Validation(format!("unknown grid {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// A named single-mode experiment.
#[derive(Debug, Clone)]
pub struct Cell {
    pub label: String,
    pub config: ExperimentConfig,
}

fn single(base: &ExperimentConfig, label: impl Into<String>, mode: Mode, gist: GistLossConfig) -> Cell {
    let mut config = base.clone();
    config.modes = vec![mode];
    config.gist = gist;
    Cell {
        label: label.into(),
        config,
    }
}

/// The cells of `grid`, derived from the loss settings in `base.gist`.
pub fn cells(base: &ExperimentConfig, grid: Grid) -> Vec<Cell> {
    let on = GistLossConfig {
        enabled: true,
        ..base.gist.clone()
    };
    // A grid that weighs an interaction term needs one to weigh.
    let interacting = GistLossConfig {
        interaction: match on.interaction {
            Interaction::None => Interaction::Bkld,
            other => other,
        },
        ..on.clone()
    };
    let baseline = || {
        single(
            base,
            "baseline",
            Mode::Traditional,
            GistLossConfig {
                enabled: false,
                ..base.gist.clone()
            },
        )
    };
    match grid {
        Grid::Lambda => std::iter::once(baseline())
            .chain(GistLossConfig::LAMBDA_GRID.iter().map(|&lambda| {
                single(
                    base,
                    format!("lambda-{lambda}"),
                    Mode::Gist,
                    GistLossConfig {
                        lambda,
                        ..interacting.clone()
                    },
                )
            }))
            .collect(),
        Grid::TokenLen => TOKEN_LENGTHS
            .iter()
            .map(|&gist_len| {
                single(
                    base,
                    format!("len-{gist_len}"),
                    Mode::Gist,
                    GistLossConfig { gist_len, ..on.clone() },
                )
            })
            .collect(),
        Grid::LossTerms => vec![
            Cell {
                label: "cls".into(),
                ..baseline()
            },
            single(
                base,
                "cls+gist",
                Mode::Gist,
                GistLossConfig {
                    lambda: 0.0,
                    interaction: Interaction::None,
                    ..on.clone()
                },
            ),
            single(
                base,
                "cls+bkl",
                Mode::Gist,
                GistLossConfig {
                    mu: 0.0,
                    interaction: Interaction::Bkld,
                    ..interacting.clone()
                },
            ),
            single(
                base,
                "cls+gist+bkl",
                Mode::Gist,
                GistLossConfig {
                    interaction: Interaction::Bkld,
                    ..interacting.clone()
                },
            ),
        ],
        Grid::Interaction => [Interaction::Bkld, Interaction::Mse, Interaction::Cosine]
            .into_iter()
            .map(|interaction| {
                single(
                    base,
                    format!("{interaction:?}").to_lowercase(),
                    Mode::Gist,
                    GistLossConfig {
                        interaction,
                        ..interacting.clone()
                    },
                )
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub mode: Mode,
    pub config_hash: String,
    #[serde(flatten)]
    pub stats: Stats,
    /// Trainable counts of the first task's model.
    pub trainable: TrainableCount,
    pub per_task: Vec<TaskCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskCell {
    pub task: String,
    #[serde(flatten)]
    pub stats: Stats,
}

/// Contents of `table.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub grid: Grid,
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, cell: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }
}

/// Runs every cell of `grid` and writes `table.json`, `table.txt` and one
/// config per cell under `<out>/ablate-<grid>-<hash>/`.
pub fn ablate(base: &ExperimentConfig, grid: Grid) -> CliResult<AblationTable> {
    let dir = base
        .output_dir
        .join(format!("ablate-{}-{}", grid.name().to_lowercase(), short(&base.hash())));
    let cell_dir = dir.join("cells");
    fs::create_dir_all(&cell_dir)?;
    let mut rows = Vec::new();
    for cell in cells(base, grid) {
        cell.config.validate()?;
        fs::write(cell_dir.join(format!("{}.json", cell.label)), cell.config.to_json())?;
        let summary = run::finetune(&cell.config)?;
        let mode = cell.config.modes[0];
        let stats = *summary
            .overall(mode)
            .ok_or_else(|| CliError::Runtime(format!("cell {} produced no {mode:?} results", cell.label)))?;
        let per_task = summary
            .tasks
            .iter()
            .map(|t| TaskCell {
                task: t.task.clone(),
                stats: t.modes[0].stats,
            })
            .collect();
        rows.push(AblationRow {
            cell: cell.label,
            mode,
            config_hash: summary.config_hash.clone(),
            stats,
            trainable: summary.tasks[0].modes[0].trainable,
            per_task,
        });
    }
    let table = AblationTable {
        grid,
        config_hash: base.hash(),
        rows,
    };
    fs::write(
        dir.join("table.json"),
        serde_json::to_string_pretty(&table).expect("table serializes") + "\n",
    )?;
    fs::write(dir.join("table.txt"), crate::report::ablation_table(&table))?;
    Ok(table)
}
