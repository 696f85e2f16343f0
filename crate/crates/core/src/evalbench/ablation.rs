use serde::{Deserialize, Serialize};

use super::{hierarchical_benchmark, BenchResult};
use crate::error::Result;
use crate::field::RenderOptions;
use crate::synthdata::Dataset;
use crate::trainer::{train_scene, TrainConfig};

/// Settings to sweep; all other hyper-parameters come from the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    Lambda(Vec<f64>),
    Dim(Vec<usize>),
}

impl Sweep {
    fn column(&self) -> &'static str {
        match self {
            Sweep::Lambda(_) => "lambda",
            Sweep::Dim(_) => "D",
        }
    }

    fn configs(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        match self {
            Sweep::Lambda(ls) => ls
                .iter()
                .map(|&l| (format!("{l}"), TrainConfig { lambda: l, ..base.clone() }))
                .collect(),
            Sweep::Dim(ds) => ds
                .iter()
                .map(|&d| (format!("{d}"), TrainConfig { dim: d, ..base.clone() }))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub result: BenchResult,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub column: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<8} {:>8} {:>8} {:>8}\n", self.column, "L1", "L2", "Avg");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<8} {:>8.1} {:>8.1} {:>8.1}\n",
                r.setting,
                100.0 * r.result.miou_l1,
                100.0 * r.result.miou_l2,
                100.0 * r.result.miou_avg
            ));
        }
        s
    }

    /// One JSON object per row.
    pub fn to_records(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "kind": "ablation",
                    "column": self.column,
                    "setting": r.setting,
                    "miou_l1": r.result.miou_l1,
                    "miou_l2": r.result.miou_l2,
                    "miou_avg": r.result.miou_avg,
                    "final_loss": r.final_loss,
                })
                .to_string()
                    + "\n"
            })
            .collect()
    }

    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }
}

/// Trains one field per setting from the same seed and benchmarks each.
pub fn ablation_sweep(dataset: &Dataset, base: &TrainConfig, sweep: &Sweep) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (setting, config) in sweep.configs(base) {
        log::info!("ablation {}={setting}: training", sweep.column());
        let out = train_scene(dataset, &config)?;
        let opts = RenderOptions {
            point_radius: config.point_radius,
            samples_per_ray: config.samples_per_ray,
        };
        let mut result = hierarchical_benchmark(&out.field, dataset, &opts)?;
        result.config = format!("{}={setting}", sweep.column());
        rows.push(AblationRow {
            setting,
            result,
            final_loss: out.log.last().map_or(f64::NAN, |r| r.total),
        });
    }
    Ok(AblationTable {
        column: sweep.column().to_string(),
        rows,
    })
}
