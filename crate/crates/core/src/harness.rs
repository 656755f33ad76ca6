//! Experiment drivers that train several model variants and collect their
//! scores into CSV result tables.
//!
//! Grid sweeps pretrain once and reuse the artifacts for every grid point,
//! since neither the AE nor the contrastive encoder depends on the swept
//! weights.

use std::fmt::Write as _;

use crate::centrality::{Measure, SpatialMode};
use crate::cluster::MetricRow;
use crate::config::ExperimentConfig;
use crate::graph::{fmt_f64, Graph};
use crate::training::{pretrain, train_from, Ablation, Pretrained, TrainOptions};
use crate::{Error, Result};

/// Value set for the α/β loss-weight sweep.
pub const LOSS_WEIGHT_VALUES: [f64; 7] = [0.01, 0.05, 0.08, 0.1, 0.12, 0.15, 0.3];

/// Default λ and θ axis for the fusion sweep.
pub const FUSION_VALUES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Row labels of the encoding study, in output order.
pub const ENCODING_VARIANTS: [&str; 5] = ["GCL-GCN", "DC, BC and CC + SPD", "DC + ED", "BC + ED", "CC + ED"];

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub variant: String,
    /// Values for the table's `param_names`, in the same order.
    pub params: Vec<f64>,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub param_names: Vec<&'static str>,
    pub rows: Vec<ResultRow>,
    /// Grid points that were skipped, with the reason.
    pub notes: Vec<String>,
}

impl ResultTable {
    fn with_params(param_names: &[&'static str]) -> Self {
        Self {
            param_names: param_names.to_vec(),
            ..Self::default()
        }
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["dataset", "variant"];
        cols.extend(&self.param_names);
        cols.extend(["acc", "nmi", "ari", "f1", "composite"]);
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let _ = write!(out, "{},{}", csv_cell(&r.dataset), csv_cell(&r.variant));
            for v in r.params.iter().chain([m.acc, m.nmi, m.ari, m.f1, m.composite()].iter()) {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Row with the highest F1; the earliest wins ties.
    pub fn best_by_f1(&self) -> Option<&ResultRow> {
        self.rows
            .iter()
            .reduce(|best, r| if r.metrics.f1 > best.metrics.f1 { r } else { best })
    }
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn run(g: &Graph, cfg: &ExperimentConfig, pre: Option<&Pretrained>) -> Result<MetricRow> {
    let pre = match pre {
        Some(p) => p.clone(),
        None => pretrain(g, cfg)?,
    };
    train_from(g, cfg, pre, TrainOptions::default())?
        .metrics
        .ok_or_else(|| Error::Config("result tables need a labelled graph".into()))
}

fn row(cfg: &ExperimentConfig, variant: impl Into<String>, params: Vec<f64>, metrics: MetricRow) -> ResultRow {
    ResultRow {
        dataset: cfg.dataset.clone(),
        variant: variant.into(),
        params,
        metrics,
    }
}

/// The full model followed by the three single-module ablations.
pub fn ablation_study(g: &Graph, cfg: &ExperimentConfig) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    let mut shared = None;
    for variant in Ablation::ALL {
        let mut c = cfg.clone();
        c.ablation = variant;
        // The contrastive-free variant skips that pretraining; the others share it.
        let metrics = if variant.uses_contrastive() {
            if shared.is_none() {
                shared = Some(pretrain(g, &c)?);
            }
            run(g, &c, shared.as_ref())?
        } else {
            run(g, &c, None)?
        };
        table.rows.push(row(cfg, variant.key(), Vec::new(), metrics));
    }
    Ok(table)
}

/// One row per encoder depth, deepest first, labelled `GCL-GCN-<depth>`.
pub fn layer_study(g: &Graph, cfg: &ExperimentConfig, depths: &[usize]) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    for &depth in depths {
        let mut c = cfg.clone();
        c.layers = depth;
        c.validate()?;
        table.rows.push(row(cfg, format!("GCL-GCN-{depth}"), Vec::new(), run(g, &c, None)?));
    }
    Ok(table)
}

/// Composite vs. single centrality encodings and ED vs. SPD spatial bias.
pub fn encoding_study(g: &Graph, cfg: &ExperimentConfig) -> Result<ResultTable> {
    let variants: [(Vec<Measure>, SpatialMode); 5] = [
        (Measure::ALL.to_vec(), SpatialMode::Euclidean),
        (Measure::ALL.to_vec(), SpatialMode::ShortestPath),
        (vec![Measure::Degree], SpatialMode::Euclidean),
        (vec![Measure::Betweenness], SpatialMode::Euclidean),
        (vec![Measure::Closeness], SpatialMode::Euclidean),
    ];
    let pre = pretrain(g, cfg)?;
    let mut table = ResultTable::default();
    for (label, (measures, mode)) in ENCODING_VARIANTS.iter().zip(variants) {
        let mut c = cfg.clone();
        c.centrality = measures;
        c.spatial_mode = mode;
        table.rows.push(row(cfg, *label, Vec::new(), run(g, &c, Some(&pre))?));
    }
    Ok(table)
}

/// Grid over λ and θ with `γ = 1 − λ − θ`; points with `λ + θ > 1` are
/// skipped and noted.
pub fn sweep_fusion(g: &Graph, cfg: &ExperimentConfig, lambdas: &[f64], thetas: &[f64]) -> Result<ResultTable> {
    let pre = pretrain(g, cfg)?;
    let mut table = ResultTable::with_params(&["lambda", "theta", "gamma"]);
    for &lambda in lambdas {
        for &theta in thetas {
            let gamma = 1.0 - lambda - theta;
            if lambda < 0.0 || theta < 0.0 || gamma < -1e-9 {
                table.notes.push(format!("skipped lambda={lambda} theta={theta}: weights not feasible"));
                continue;
            }
            let gamma = gamma.max(0.0);
            let mut c = cfg.clone();
            (c.lambda, c.theta, c.gamma) = (lambda, theta, gamma);
            let label = format!("lambda={lambda} theta={theta} gamma={}", fmt_weight(gamma));
            table.rows.push(row(cfg, label, vec![lambda, theta, gamma], run(g, &c, Some(&pre))?));
        }
    }
    Ok(table)
}

fn fmt_weight(x: f64) -> String {
    // Prints 1 - 0.4 - 0.1 as 0.5 rather than 0.49999999999999994.
    let r = format!("{x:.12}");
    r.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Full cross product of `alphas × betas`.
pub fn sweep_loss_weights(g: &Graph, cfg: &ExperimentConfig, alphas: &[f64], betas: &[f64]) -> Result<ResultTable> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::Config("loss-weight sweep needs at least one alpha and one beta".into()));
    }
    let pre = pretrain(g, cfg)?;
    let mut table = ResultTable::with_params(&["alpha", "beta"]);
    for &alpha in alphas {
        for &beta in betas {
            let mut c = cfg.clone();
            (c.alpha, c.beta) = (alpha, beta);
            c.validate()?;
            let label = format!("alpha={alpha} beta={beta}");
            table.rows.push(row(cfg, label, vec![alpha, beta], run(g, &c, Some(&pre))?));
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ResultTable {
        let m = MetricRow {
            acc: 0.5,
            nmi: 0.25,
            ari: 0.0,
            f1: 0.75,
        };
        ResultTable {
            param_names: vec!["alpha"],
            rows: vec![row(&ExperimentConfig::default(), "a, b", vec![0.1], m)],
            notes: Vec::new(),
        }
    }

    #[test]
    fn csv_layout() {
        let csv = table().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("dataset,variant,alpha,acc,nmi,ari,f1,composite"));
        let cells: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(cells[..3], ["custom", "\"a", " b\""]);
        let nums: Vec<f64> = cells[3..].iter().map(|c| c.parse().unwrap()).collect();
        assert_eq!(nums, [0.1, 0.5, 0.25, 0.0, 0.75, 0.375]);
    }

    #[test]
    fn weight_labels_are_rounded() {
        assert_eq!(fmt_weight(1.0 - 0.4 - 0.1), "0.5");
        assert_eq!(fmt_weight(0.0), "0");
    }

    #[test]
    fn best_row_prefers_earliest() {
        let mut t = table();
        let mut second = t.rows[0].clone();
        second.variant = "later".into();
        t.rows.push(second);
        assert_eq!(t.best_by_f1().unwrap().variant, "a, b");
    }
}
