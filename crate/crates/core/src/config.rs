//! Flat `key = value` experiment configuration with named dataset presets.
//!
//! Lines starting with `#` are comments. A `preset` key, wherever it appears,
//! is applied first and the remaining keys override it. Relative data paths
//! are resolved against the config file's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::centrality::{parse_measures, Measure, SpatialMode};
use crate::cluster::NmiNormalization;
use crate::graph::{generate_sbm, load_graph, Graph, SbmSpec};
use crate::layers::{Ladder, SpatialSign};
use crate::training::Ablation;
use crate::{Error, Result};

/// Full-ladder hidden widths; shallower models keep a subset (see [`ExperimentConfig::ladder`]).
pub const DEFAULT_WIDTHS: [usize; 3] = [500, 500, 2000];

const FUSION_TOL: f64 = 1e-9;

/// Planted-partition data generated on the fly.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmConfig {
    pub blocks: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub features: usize,
    pub sigma: f64,
    /// Block mean offset in units of `sigma`.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            blocks: Vec::new(),
            p_in: 0.15,
            p_out: 0.01,
            features: 12,
            sigma: 1.0,
            separation: 3.0,
            seed: 0,
        }
    }
}

impl SbmConfig {
    pub fn spec(&self) -> Result<SbmSpec> {
        let spec = SbmSpec::separated(
            self.blocks.clone(),
            self.features,
            self.p_in,
            self.p_out,
            self.sigma,
            self.separation,
        );
        if spec.block_sizes.is_empty() || spec.block_sizes.contains(&0) || self.features == 0 {
            return Err(Error::Config("sbm.blocks and sbm.features must be positive".into()));
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum DataSource {
    #[default]
    Unset,
    Files {
        features: PathBuf,
        edges: PathBuf,
        labels: Option<PathBuf>,
    },
    Sbm(SbmConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveConfig {
    /// Feature mask drop rate.
    pub p: f64,
    pub tau: f64,
    pub beta_sim: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            p: 0.2,
            tau: 0.5,
            beta_sim: 1.0,
            hidden: 256,
            epochs: 50,
            lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub data: DataSource,
    pub epochs: usize,
    /// Clustering-loss weight.
    pub alpha: f64,
    /// Consistency-loss weight.
    pub beta: f64,
    pub n_z: usize,
    pub lr: f64,
    /// GCN, AE and attention fusion weights.
    pub lambda: f64,
    pub theta: f64,
    pub gamma: f64,
    /// AE injection weight.
    pub epsilon: f64,
    /// Student-t degrees of freedom.
    pub t: f64,
    pub k: usize,
    pub seed: u64,
    pub heads: usize,
    pub layers: usize,
    pub widths: [usize; 3],
    pub centrality: Vec<Measure>,
    /// Divide each centrality column by its maximum before it enters the
    /// attention projections.
    pub centrality_max_scale: bool,
    pub spatial_mode: SpatialMode,
    pub spatial_sign: SpatialSign,
    pub contrastive: ContrastiveConfig,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub kmeans_restarts: usize,
    pub ablation: Ablation,
    /// Use the raw `A·X` (not `Ã·X`) as the attention/GCN decoder target.
    pub raw_ax_target: bool,
    pub nmi: NmiNormalization,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "custom".into(),
            data: DataSource::Unset,
            epochs: 200,
            alpha: 0.1,
            beta: 0.1,
            n_z: 10,
            lr: 1e-4,
            lambda: 0.4,
            theta: 0.1,
            gamma: 0.5,
            epsilon: 0.5,
            t: 1.0,
            k: 0,
            seed: 0,
            heads: 1,
            layers: 4,
            widths: DEFAULT_WIDTHS,
            centrality: Measure::ALL.to_vec(),
            centrality_max_scale: true,
            spatial_mode: SpatialMode::Euclidean,
            spatial_sign: SpatialSign::Plus,
            contrastive: ContrastiveConfig::default(),
            pretrain_epochs: 50,
            pretrain_lr: 1e-3,
            kmeans_restarts: 20,
            ablation: Ablation::Norm,
            raw_ax_target: false,
            nmi: NmiNormalization::Geometric,
        }
    }
}

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: [&str; 6] = ["acm", "dblp", "citeseer", "cora", "hhar", "reuters"];

impl ExperimentConfig {
    /// Per-dataset settings: epochs, α, β, n_z, lr, λ, θ, γ, ε and class count.
    pub fn preset(name: &str) -> Result<Self> {
        let name = name.trim().to_ascii_lowercase();
        #[rustfmt::skip]
        let (epochs, alpha, beta, n_z, lr, lambda, theta, gamma, k) = match name.as_str() {
            "acm" =>      (200, 0.3,  0.3,  10, 5e-5, 0.4, 0.3, 0.3, 3),
            "dblp" =>     (200, 0.08, 0.3,  10, 2e-3, 0.7, 0.1, 0.2, 4),
            "citeseer" => (200, 0.3,  0.12, 10, 4e-5, 0.1, 0.8, 0.1, 6),
            "cora" =>     (400, 0.1,  0.1,  10, 1e-4, 0.4, 0.1, 0.5, 7),
            "hhar" =>     (600, 0.15, 0.05, 20, 1e-4, 0.1, 0.8, 0.1, 6),
            "reuters" =>  (200, 0.3,  0.3,  20, 1e-4, 0.4, 0.1, 0.5, 4),
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        Ok(Self {
            dataset: name,
            epochs,
            alpha,
            beta,
            n_z,
            lr,
            lambda,
            theta,
            gamma,
            epsilon: 0.5,
            k,
            ..Self::default()
        })
    }

    /// Layer widths for the configured depth:
    /// 1 → `[f, n_z]`, 2 → `[f, w0, n_z]`, 3 → `[f, w0, w2, n_z]`,
    /// 4 → `[f, w0, w1, w2, n_z]`.
    pub fn ladder(&self, features: usize) -> Result<Ladder> {
        let [w0, w1, w2] = self.widths;
        let hidden: Vec<usize> = match self.layers {
            1 => vec![],
            2 => vec![w0],
            3 => vec![w0, w2],
            4 => vec![w0, w1, w2],
            d => return Err(Error::Config(format!("layers must be in 1..=4, got {d}"))),
        };
        Ladder::from_parts(features, &hidden, self.n_z)
    }

    /// Set one key. Values are validated only for syntax; call
    /// [`validate`](Self::validate) once all keys are in.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "dataset" => self.dataset = value.to_string(),
            "features" => self.files_mut().0.clone_from(&PathBuf::from(value)),
            "edges" => self.files_mut().1.clone_from(&PathBuf::from(value)),
            "labels" => *self.files_mut().2 = Some(PathBuf::from(value)),
            "epochs" => self.epochs = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "n_z" => self.n_z = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "theta" => self.theta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "t" => self.t = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "widths" => {
                let w: Vec<usize> = list(key, value)?;
                self.widths = w.try_into().map_err(|w: Vec<usize>| {
                    Error::Config(format!("widths needs exactly 3 entries, got {}", w.len()))
                })?;
            }
            "centrality" => self.centrality = parse_measures(value)?,
            "centrality_scale" => {
                self.centrality_max_scale = match value {
                    "max" => true,
                    "none" => false,
                    other => return Err(Error::Config(format!("unknown centrality_scale {other:?}"))),
                }
            }
            "spatial_mode" => self.spatial_mode = value.parse()?,
            "spatial_sign" => self.spatial_sign = value.parse()?,
            "contrastive.p" => self.contrastive.p = num(key, value)?,
            "contrastive.tau" => self.contrastive.tau = num(key, value)?,
            "contrastive.beta_sim" => self.contrastive.beta_sim = num(key, value)?,
            "contrastive.hidden" => self.contrastive.hidden = num(key, value)?,
            "contrastive.epochs" => self.contrastive.epochs = num(key, value)?,
            "contrastive.lr" => self.contrastive.lr = num(key, value)?,
            "pretrain.epochs" => self.pretrain_epochs = num(key, value)?,
            "pretrain.lr" => self.pretrain_lr = num(key, value)?,
            "kmeans.restarts" => self.kmeans_restarts = num(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            "raw_ax_target" => self.raw_ax_target = num(key, value)?,
            "nmi" => {
                self.nmi = match value {
                    "geometric" => NmiNormalization::Geometric,
                    "arithmetic" => NmiNormalization::Arithmetic,
                    other => return Err(Error::Config(format!("unknown nmi normalization {other:?}"))),
                }
            }
            "sbm.blocks" => self.sbm_mut().blocks = list(key, value)?,
            "sbm.p_in" => self.sbm_mut().p_in = num(key, value)?,
            "sbm.p_out" => self.sbm_mut().p_out = num(key, value)?,
            "sbm.features" => self.sbm_mut().features = num(key, value)?,
            "sbm.sigma" => self.sbm_mut().sigma = num(key, value)?,
            "sbm.separation" => self.sbm_mut().separation = num(key, value)?,
            "sbm.seed" => self.sbm_mut().seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    fn files_mut(&mut self) -> (&mut PathBuf, &mut PathBuf, &mut Option<PathBuf>) {
        if !matches!(self.data, DataSource::Files { .. }) {
            self.data = DataSource::Files {
                features: PathBuf::new(),
                edges: PathBuf::new(),
                labels: None,
            };
        }
        match &mut self.data {
            DataSource::Files {
                features,
                edges,
                labels,
            } => (features, edges, labels),
            _ => unreachable!(),
        }
    }

    fn sbm_mut(&mut self) -> &mut SbmConfig {
        if !matches!(self.data, DataSource::Sbm(_)) {
            self.data = DataSource::Sbm(SbmConfig::default());
        }
        match &mut self.data {
            DataSource::Sbm(s) => s,
            _ => unreachable!(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_params()?;
        match &self.data {
            DataSource::Unset => Err(Error::Config(
                "missing data source: set features and edges, or sbm.blocks".into(),
            )),
            DataSource::Files { features, edges, .. } => {
                if features.as_os_str().is_empty() || edges.as_os_str().is_empty() {
                    Err(Error::Config("both features and edges paths are required".into()))
                } else {
                    Ok(())
                }
            }
            DataSource::Sbm(s) => s.spec().map(|_| ()),
        }
    }

    /// Range checks on every model and training parameter; ignores the data source.
    pub fn validate_params(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let sum = self.lambda + self.theta + self.gamma;
        if (sum - 1.0).abs() > FUSION_TOL {
            return bad(format!(
                "fusion weights must sum to 1 (lambda + theta + gamma = {sum})"
            ));
        }
        for (name, v) in [("lambda", self.lambda), ("theta", self.theta), ("gamma", self.gamma)] {
            if !(v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must be in [0, 1], got {}", self.epsilon));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative".into());
        }
        if !(self.t > 0.0) {
            return bad(format!("t must be positive, got {}", self.t));
        }
        if self.k < 1 {
            return bad("missing key k (cluster count)".into());
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) || !(self.contrastive.lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.n_z < 1 || self.heads < 1 || self.widths.contains(&0) {
            return bad("n_z, heads and widths must be at least 1".into());
        }
        if !(1..=4).contains(&self.layers) {
            return bad(format!("layers must be in 1..=4, got {}", self.layers));
        }
        if self.centrality.is_empty() {
            return bad("centrality needs at least one measure".into());
        }
        let c = &self.contrastive;
        if !(0.0..=1.0).contains(&c.p) {
            return bad(format!("contrastive.p must be in [0, 1], got {}", c.p));
        }
        if !(c.tau > 0.0) || !(c.beta_sim > 0.0) || c.hidden < 1 {
            return bad("contrastive.tau, beta_sim and hidden must be positive".into());
        }
        if self.kmeans_restarts < 1 {
            return bad("kmeans.restarts must be at least 1".into());
        }
        Ok(())
    }

    /// Loads or generates the configured graph.
    pub fn load_graph(&self) -> Result<Graph> {
        match &self.data {
            DataSource::Unset => Err(Error::Config("no data source configured".into())),
            DataSource::Files {
                features,
                edges,
                labels,
            } => load_graph(features, edges, labels.as_deref()),
            DataSource::Sbm(s) => generate_sbm(&s.spec()?, s.seed),
        }
    }

    /// Serialises every key; parsing the output yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset", &self.dataset);
        match &self.data {
            DataSource::Unset => {}
            DataSource::Files {
                features,
                edges,
                labels,
            } => {
                kv("features", &features.display());
                kv("edges", &edges.display());
                if let Some(l) = labels {
                    kv("labels", &l.display());
                }
            }
            DataSource::Sbm(sbm) => {
                kv("sbm.blocks", &join(&sbm.blocks));
                kv("sbm.p_in", &sbm.p_in);
                kv("sbm.p_out", &sbm.p_out);
                kv("sbm.features", &sbm.features);
                kv("sbm.sigma", &sbm.sigma);
                kv("sbm.separation", &sbm.separation);
                kv("sbm.seed", &sbm.seed);
            }
        }
        kv("epochs", &self.epochs);
        kv("alpha", &self.alpha);
        kv("beta", &self.beta);
        kv("n_z", &self.n_z);
        kv("lr", &self.lr);
        kv("lambda", &self.lambda);
        kv("theta", &self.theta);
        kv("gamma", &self.gamma);
        kv("epsilon", &self.epsilon);
        kv("t", &self.t);
        kv("k", &self.k);
        kv("seed", &self.seed);
        kv("heads", &self.heads);
        kv("layers", &self.layers);
        kv("widths", &join(&self.widths));
        kv("centrality", &join(&self.centrality));
        kv("centrality_scale", &if self.centrality_max_scale { "max" } else { "none" });
        kv("spatial_mode", &self.spatial_mode);
        kv("spatial_sign", &self.spatial_sign);
        kv("contrastive.p", &self.contrastive.p);
        kv("contrastive.tau", &self.contrastive.tau);
        kv("contrastive.beta_sim", &self.contrastive.beta_sim);
        kv("contrastive.hidden", &self.contrastive.hidden);
        kv("contrastive.epochs", &self.contrastive.epochs);
        kv("contrastive.lr", &self.contrastive.lr);
        kv("pretrain.epochs", &self.pretrain_epochs);
        kv("pretrain.lr", &self.pretrain_lr);
        kv("kmeans.restarts", &self.kmeans_restarts);
        kv("ablation", &self.ablation.key());
        kv("raw_ax_target", &self.raw_ax_target);
        kv(
            "nmi",
            &match self.nmi {
                NmiNormalization::Geometric => "geometric",
                NmiNormalization::Arithmetic => "arithmetic",
            },
        );
        s
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| num(key, v.trim()))
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Parses config text. Relative data paths are joined onto `base` when given.
pub fn parse_config_str(text: &str, base: Option<&Path>) -> Result<ExperimentConfig> {
    parse_config_str_with(text, base, &[])
}

/// Like [`parse_config_str`], with `overrides` applied after the file's own
/// keys and before validation. Override paths are taken as given.
pub fn parse_config_str_with(
    text: &str,
    base: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let mut entries = Vec::new();
    let mut preset = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if entries.iter().any(|(k, _)| *k == key) || (key == "preset" && preset.is_some()) {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
        }
        if key == "preset" {
            preset = Some(value);
        } else {
            entries.push((key, value));
        }
    }
    let mut cfg = match preset {
        Some(p) => ExperimentConfig::preset(p)?,
        None => ExperimentConfig::default(),
    };
    for (key, value) in entries {
        cfg.set(key, value)?;
    }
    if let (Some(base), DataSource::Files { features, edges, labels }) = (base, &mut cfg.data) {
        for p in [Some(features), Some(edges), labels.as_mut()].into_iter().flatten() {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
    }
    for (key, value) in overrides {
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, path.parent())
}

pub fn parse_config_with(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str_with(&text, path.parent(), overrides)
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_text())?;
    Ok(())
}
