//! Aggregate statistics and human-readable tables.

use serde::{Deserialize, Serialize};

use crate::ablate::AblationTable;
use crate::run::FinetuneSummary;

/// Mean and sample standard deviation (n − 1; zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Stats {
    let n = values.len();
    if n == 0 {
        return Stats {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Stats { mean, std, n }
}

fn pct(s: &Stats) -> String {
    format!("{:6.2} ± {:5.2}", 100.0 * s.mean, 100.0 * s.std)
}

/// Accuracy (%) per task and mode, mean ± std over seeds.
pub fn finetune_table(summary: &FinetuneSummary) -> String {
    let modes: Vec<_> = summary.overall.iter().map(|o| o.mode).collect();
    let mut out = format!("{:<20}", "task");
    for m in &modes {
        out.push_str(&format!(" {:>16}", m.name()));
    }
    out.push('\n');
    for t in &summary.tasks {
        out.push_str(&format!("{:<20}", t.task));
        for m in &t.modes {
            out.push_str(&format!(" {:>16}", pct(&m.stats)));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<20}", "overall"));
    for o in &summary.overall {
        out.push_str(&format!(" {:>16}", pct(&o.stats)));
    }
    out.push('\n');
    out.push_str(&format!(
        "seeds {:?}, config {}\n",
        summary.seeds,
        crate::config::short(&summary.config_hash)
    ));
    out
}

/// One row per cell: accuracy (%) and trainable parameters without head.
pub fn ablation_table(table: &AblationTable) -> String {
    let mut out = format!(
        "{:<16} {:>16} {:>6} {:>12} {:>12}\n",
        table.grid.name(),
        "accuracy",
        "runs",
        "params",
        "gist params"
    );
    for row in &table.rows {
        out.push_str(&format!(
            "{:<16} {:>16} {:>6} {:>12} {:>12}\n",
            row.cell,
            pct(&row.stats),
            row.stats.n,
            row.trainable.without_head,
            row.trainable.gist
        ));
    }
    out
}
