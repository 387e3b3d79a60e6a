//! Ablation runner: the α × m_k grid plus single-axis variants.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::ExperimentData;
use super::run_experiment;
use crate::error::Result;
use crate::model::HeadKind;
use crate::targets::{min_pairwise_target_distance, TargetMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationPlan {
    pub alphas: Vec<f64>,
    pub margins: Vec<f64>,
    /// Also run the target-mode, routing and head variants of the base config.
    pub variants: bool,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan {
            alphas: vec![0.5, 1.0, 2.0],
            margins: vec![5.0, 10.0, 20.0],
            variants: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    /// `grid`, `targets`, `routing` or `head`.
    pub axis: String,
    pub label: String,
    pub alpha: f64,
    pub margin: f64,
    pub target_mode: TargetMode,
    pub routing_iterations: usize,
    pub head: HeadKind,
    pub auroc: Option<f64>,
    pub macro_f1: f64,
    pub closed_set_accuracy: f64,
    pub min_pairwise_target_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub alphas: Vec<f64>,
    pub margins: Vec<f64>,
    pub cells: Vec<AblationCell>,
}

fn fmt_auroc(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl AblationTable {
    pub fn grid_cell(&self, alpha: f64, margin: f64) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.axis == "grid" && c.alpha == alpha && c.margin == margin)
    }

    /// Markdown: the AUROC grid (rows α, columns m_k) followed by the variants.
    pub fn render(&self) -> String {
        let mut out = String::from("| |");
        for m in &self.margins {
            let _ = write!(out, " m_k={m:.1} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.margins.len()));
        out.push('\n');
        for a in &self.alphas {
            let _ = write!(out, "| α={a:.1} |");
            for m in &self.margins {
                let _ = write!(out, " {} |", fmt_auroc(self.grid_cell(*a, *m).and_then(|c| c.auroc)));
            }
            out.push('\n');
        }
        let variants: Vec<&AblationCell> = self.cells.iter().filter(|c| c.axis != "grid").collect();
        if !variants.is_empty() {
            out.push_str("\n| variant | AUROC | macro-F1 | closed-set acc | min target distance |\n|---|---|---|---|---|\n");
            for c in variants {
                let _ = writeln!(
                    out,
                    "| {} | {} | {:.4} | {:.4} | {:.4} |",
                    c.label,
                    fmt_auroc(c.auroc),
                    c.macro_f1,
                    c.closed_set_accuracy,
                    c.min_pairwise_target_distance
                );
            }
        }
        out
    }
}

fn run_cell(axis: &str, label: String, cfg: &ExperimentConfig, data: &ExperimentData) -> Result<AblationCell> {
    log::info!("ablation: {label}");
    let outcome = run_experiment(cfg, data, &mut super::RunLog::in_memory())?;
    let model = super::model_from_checkpoint(&outcome.checkpoint)?;
    Ok(AblationCell {
        axis: axis.to_string(),
        label,
        alpha: cfg.loss.alpha,
        margin: cfg.loss.margin,
        target_mode: cfg.model.target_mode,
        routing_iterations: cfg.model.routing_iterations,
        head: cfg.model.head,
        auroc: outcome.eval.report.auroc,
        macro_f1: outcome.eval.report.macro_f1,
        closed_set_accuracy: outcome.eval.report.closed_set_accuracy,
        min_pairwise_target_distance: min_pairwise_target_distance(model.bank())?,
    })
}

/// Trains, calibrates and evaluates every configuration of `plan` on `data`.
pub fn run_ablation(base: &ExperimentConfig, plan: &AblationPlan, data: &ExperimentData) -> Result<AblationTable> {
    let mut cells = Vec::new();
    for &alpha in &plan.alphas {
        for &margin in &plan.margins {
            let mut cfg = base.clone();
            cfg.loss.alpha = alpha;
            cfg.loss.margin = margin;
            cells.push(run_cell("grid", format!("α={alpha:.1}, m_k={margin:.1}"), &cfg, data)?);
        }
    }
    if plan.variants {
        for mode in [TargetMode::Fixed, TargetMode::Learnable] {
            let mut cfg = base.clone();
            cfg.model.target_mode = mode;
            cells.push(run_cell("targets", format!("targets {mode:?}").to_lowercase(), &cfg, data)?);
        }
        for (label, iterations) in [("routing off", 1), ("routing on", base.model.routing_iterations.max(2))] {
            let mut cfg = base.clone();
            cfg.model.head = HeadKind::Capsules;
            cfg.model.routing_iterations = iterations;
            cells.push(run_cell("routing", label.to_string(), &cfg, data)?);
        }
        let mut cfg = base.clone();
        cfg.model.head = HeadKind::Affine;
        cells.push(run_cell("head", "affine head".to_string(), &cfg, data)?);
    }
    Ok(AblationTable {
        alphas: plan.alphas.clone(),
        margins: plan.margins.clone(),
        cells,
    })
}
