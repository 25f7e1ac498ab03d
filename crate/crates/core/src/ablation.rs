//! Cross-product ablation over feature mode, aggregation and per-branch
//! reference toggles, each cell run under the repeated-split protocol.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::branch::{Aggregation, FeatureMode};
use crate::dataio::Dataset;
use crate::model::ModelConfig;
use crate::training::{run_protocol, MetricSummary, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Feature,
    Aggregation,
    VisualRefs,
    AlignRefs,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::Feature,
        AblationAxis::Aggregation,
        AblationAxis::VisualRefs,
        AblationAxis::AlignRefs,
    ];
}

impl FromStr for AblationAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "feature" => Ok(Self::Feature),
            "aggregation" => Ok(Self::Aggregation),
            "visual_refs" | "visual-refs" => Ok(Self::VisualRefs),
            "align_refs" | "align-refs" => Ok(Self::AlignRefs),
            other => Err(format!(
                "unknown ablation axis `{other}` (expected feature, aggregation, visual_refs, align_refs)"
            )),
        }
    }
}

/// One point of the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub feature: FeatureMode,
    pub aggregation: Aggregation,
    pub visual_refs: bool,
    pub align_refs: bool,
}

impl AblationCell {
    pub fn of(config: &ModelConfig) -> Self {
        Self {
            feature: config.feature_mode,
            aggregation: config.aggregation,
            visual_refs: config.visual_refs,
            align_refs: config.align_refs,
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            feature_mode: self.feature,
            aggregation: self.aggregation,
            visual_refs: self.visual_refs,
            align_refs: self.align_refs,
            ..base.clone()
        }
    }

    pub fn label(&self, axes: &[AblationAxis]) -> String {
        let mut parts = Vec::new();
        if axes.contains(&AblationAxis::Feature) || axes.contains(&AblationAxis::Aggregation) {
            parts.push(format!("{} + {}", self.feature, self.aggregation));
        }
        let on = |b: bool| if b { "on" } else { "off" };
        if axes.contains(&AblationAxis::VisualRefs) {
            parts.push(format!("visual refs {}", on(self.visual_refs)));
        }
        if axes.contains(&AblationAxis::AlignRefs) {
            parts.push(format!("align refs {}", on(self.align_refs)));
        }
        parts.join(", ")
    }
}

/// Cells of the cross product in fixed order: Diff before Self, Graph before
/// Avg, references on before off. Axes not listed keep the base value.
pub fn ablation_cells(base: &ModelConfig, axes: &[AblationAxis]) -> Vec<AblationCell> {
    let mut cells = vec![AblationCell::of(base)];
    for axis in AblationAxis::ALL {
        if !axes.contains(&axis) {
            continue;
        }
        cells = cells
            .into_iter()
            .flat_map(|c| -> Vec<AblationCell> {
                match axis {
                    AblationAxis::Feature => [FeatureMode::Diff, FeatureMode::Raw]
                        .map(|feature| AblationCell { feature, ..c })
                        .to_vec(),
                    AblationAxis::Aggregation => [Aggregation::Graph, Aggregation::Avg]
                        .map(|aggregation| AblationCell { aggregation, ..c })
                        .to_vec(),
                    AblationAxis::VisualRefs => [true, false]
                        .map(|visual_refs| AblationCell { visual_refs, ..c })
                        .to_vec(),
                    AblationAxis::AlignRefs => [true, false]
                        .map(|align_refs| AblationCell { align_refs, ..c })
                        .to_vec(),
                }
            })
            .collect();
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub cell: AblationCell,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<MetricSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axes: Vec<AblationAxis>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, cell: &AblationCell) -> Option<&AblationRow> {
        self.rows.iter().find(|r| &r.cell == cell)
    }
}

/// Runs every cell with the same training config, so all cells see the same
/// splits and seeds. A failing cell is recorded and the run continues.
pub fn run_ablation(
    dataset: &Dataset,
    base: &ModelConfig,
    train_config: &TrainConfig,
    axes: &[AblationAxis],
) -> AblationReport {
    let mut axes: Vec<AblationAxis> = axes.to_vec();
    axes.sort();
    axes.dedup();
    let rows = ablation_cells(base, &axes)
        .into_iter()
        .map(|cell| {
            let label = cell.label(&axes);
            log::info!("ablation cell: {label}");
            match run_protocol(dataset, &cell.apply(base), train_config) {
                Ok(report) => AblationRow {
                    label,
                    cell,
                    summary: Some(report.summary),
                    error: None,
                },
                Err(e) => AblationRow {
                    label,
                    cell,
                    summary: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    AblationReport { axes, rows }
}
