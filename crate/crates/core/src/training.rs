//! Pretraining, the joint clustering loop and ablation variants.
//!
//! One epoch of the joint loop:
//!
//! 1. the AE, GCN and attention channels run forward; from the second layer
//!    on, each GCN/attention encoder input is blended with the AE output of
//!    the previous layer (`ε·H + (1−ε)·Z`);
//! 2. the three bottlenecks are fused into `Z_L = Ã(λZ_gcn + θZ_ae + γZ_t)`;
//! 3. Student-t assignments `Q` (from `Z_L`) and `Q′` (from the AE bottleneck)
//!    share one trainable centroid set, and the target `P` is recomputed from
//!    `Q` outside the tape;
//! 4. Adam takes one step on
//!    `L_w + 0.1(L_a1 + L_a2) + L_AE + α·KL(P‖Q) + β·KL(Q‖Q′)`.
//!
//! All randomness derives from `cfg.seed`; each consumer draws from its own
//! ChaCha stream so that skipping a stage (e.g. contrastive pretraining)
//! leaves the other stages' draws unchanged.

use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Tape, Var};
use crate::centrality::{composite_centrality, spatial_bias};
use crate::cluster::{kmeans, MetricRow};
use crate::config::ExperimentConfig;
use crate::graph::{fmt_f64, normalize_adjacency, Graph};
use crate::layers::{
    ae_forward, ae_loss, attention_rows, augment_features, combined_similarity, contrastive_encoder,
    contrastive_loss, gcn_layer, graphormer_layer, inner_product_decode, AeOutput, AeParams,
    ContrastiveParams, GcnParams, GraphormerParams, Ladder,
};
use crate::{Error, Matrix, Result};

/// Probability floor applied before taking logs in [`kl_div`].
pub const KL_FLOOR: f64 = 1e-12;

/// Weight of each adjacency-reconstruction term in the joint loss.
pub const ADJ_LOSS_WEIGHT: f64 = 0.1;

const STREAM_AE: u64 = 1;
const STREAM_CONTRASTIVE: u64 = 2;
const STREAM_GCN: u64 = 3;
const STREAM_GRAPHORMER: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Model variant: the full model or one module removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Ablation {
    #[default]
    Norm,
    NoGcn,
    NoGraphormer,
    NoContrastive,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Norm,
        Ablation::NoGcn,
        Ablation::NoGraphormer,
        Ablation::NoContrastive,
    ];

    /// Row label used in result tables and config files.
    pub fn key(self) -> &'static str {
        match self {
            Ablation::Norm => "norm",
            Ablation::NoGcn => "-GCN",
            Ablation::NoGraphormer => "-Graphormer",
            Ablation::NoContrastive => "-ContrastiveLearning",
        }
    }

    pub fn uses_gcn(self) -> bool {
        self != Ablation::NoGcn
    }

    pub fn uses_graphormer(self) -> bool {
        self != Ablation::NoGraphormer
    }

    pub fn uses_contrastive(self) -> bool {
        self != Ablation::NoContrastive
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_lowercase();
        match norm.as_str() {
            "norm" | "full" => Ok(Ablation::Norm),
            "-gcn" => Ok(Ablation::NoGcn),
            "-graphormer" => Ok(Ablation::NoGraphormer),
            "-contrastivelearning" | "-contrastive" => Ok(Ablation::NoContrastive),
            _ => Err(Error::Config(format!("unknown ablation variant {s:?}"))),
        }
    }
}

/// Graph-derived constants shared by every epoch.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub features: Matrix,
    /// `Ã = D^{-1/2}(A + I)D^{-1/2}`.
    pub adj_norm: Matrix,
    /// Binary adjacency without self-loops.
    pub adjacency: Matrix,
    /// Target for the GCN/attention decoders.
    pub target_w: Matrix,
    /// Target for the AE decoder.
    pub target_ae: Matrix,
    pub centrality: Matrix,
    pub rows: Rc<Vec<Vec<(usize, f64)>>>,
    pub ladder: Ladder,
}

impl Prepared {
    pub fn new(g: &Graph, cfg: &ExperimentConfig) -> Result<Self> {
        let features = g.features().clone();
        let adj_norm = normalize_adjacency(g).matrix;
        let adjacency = g.adjacency();
        let target_ae = adj_norm.dot(&features);
        let target_w = if cfg.raw_ax_target {
            adjacency.dot(&features)
        } else {
            target_ae.clone()
        };
        let mut centrality = composite_centrality(g, &cfg.centrality)?.values().clone();
        if cfg.centrality_max_scale {
            for mut col in centrality.columns_mut() {
                let max = col.fold(0.0f64, |m, &v| m.max(v.abs()));
                if max > 0.0 {
                    col /= max;
                }
            }
        }
        let rows = attention_rows(&spatial_bias(g, cfg.spatial_mode), cfg.spatial_sign);
        Ok(Self {
            ladder: cfg.ladder(g.num_features())?,
            features,
            adj_norm,
            adjacency,
            target_w,
            target_ae,
            centrality,
            rows,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }
}

/// Trainable parameters plus the frozen contrastive features `X_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub ae: AeParams,
    pub gcn: Option<GcnParams>,
    pub graphormer: Option<GraphormerParams>,
    /// `k × n_z`.
    pub centroids: Matrix,
    /// `n × f`.
    pub x_c: Matrix,
}

/// [`ModelState`] lifted onto a tape.
#[derive(Debug, Clone)]
pub struct ModelVars<'t> {
    pub ae: AeParams<Var<'t>>,
    pub gcn: Option<GcnParams<Var<'t>>>,
    pub graphormer: Option<GraphormerParams<Var<'t>>>,
    pub centroids: Var<'t>,
}

impl ModelState {
    /// Fresh GCN/attention weights around pretrained AE weights and `X_c`.
    pub fn init(prep: &Prepared, cfg: &ExperimentConfig, ae: AeParams, x_c: Matrix, centroids: Matrix) -> Self {
        let gcn = cfg
            .ablation
            .uses_gcn()
            .then(|| GcnParams::init(&prep.ladder, &mut stream(cfg.seed, STREAM_GCN)));
        let graphormer = cfg.ablation.uses_graphormer().then(|| {
            GraphormerParams::init(
                &prep.ladder,
                prep.centrality.ncols(),
                cfg.heads,
                &mut stream(cfg.seed, STREAM_GRAPHORMER),
            )
        });
        Self {
            ae,
            gcn,
            graphormer,
            centroids,
            x_c,
        }
    }

    /// Trainable tensors in a fixed order: AE, GCN, attention, centroids.
    pub fn trainable(&self) -> Vec<&Matrix> {
        let mut out = self.ae.tensors();
        if let Some(g) = &self.gcn {
            out.extend(g.tensors());
        }
        if let Some(g) = &self.graphormer {
            out.extend(g.tensors());
        }
        out.push(&self.centroids);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.ae.tensors_mut();
        if let Some(g) = &mut self.gcn {
            out.extend(g.tensors_mut());
        }
        if let Some(g) = &mut self.graphormer {
            out.extend(g.tensors_mut());
        }
        out.push(&mut self.centroids);
        out
    }

    /// Every tensor, `X_c` included, with a stable name.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut names = self.ae.names("ae");
        if let Some(g) = &self.gcn {
            names.extend(g.names("gcn"));
        }
        if let Some(g) = &self.graphormer {
            names.extend(g.names("attn"));
        }
        names.push("centroids".into());
        let mut tensors = self.trainable();
        names.push("x_c".into());
        tensors.push(&self.x_c);
        names.into_iter().zip(tensors).collect()
    }

    /// Overwrites every tensor from `(name, value)` pairs; names and shapes
    /// must match this state exactly.
    pub fn load_named(&mut self, entries: Vec<(String, Matrix)>) -> Result<()> {
        let expected: Vec<(String, (usize, usize))> = self
            .named()
            .into_iter()
            .map(|(n, m)| (n, m.dim()))
            .collect();
        if entries.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model has {}",
                entries.len(),
                expected.len()
            )));
        }
        for ((name, value), (want, shape)) in entries.iter().zip(&expected) {
            if name != want || value.dim() != *shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match {want} {shape:?}",
                    value.dim()
                )));
            }
        }
        let mut values = entries.into_iter().map(|(_, v)| v);
        for slot in self.trainable_mut() {
            *slot = values.next().expect("count checked");
        }
        self.x_c = values.next().expect("count checked");
        Ok(())
    }

    /// Rebuilds the structure around `vars`, which must follow [`trainable`](Self::trainable) order.
    pub fn vars_from<'t>(&self, vars: &[Var<'t>]) -> ModelVars<'t> {
        let mut it = vars.iter().copied();
        let mut next = |_: &Matrix| it.next().expect("one var per tensor");
        let ae = self.ae.map(&mut next);
        let gcn = self.gcn.as_ref().map(|g| g.map(&mut next));
        let graphormer = self.graphormer.as_ref().map(|g| g.map(&mut next));
        let centroids = next(&self.centroids);
        ModelVars {
            ae,
            gcn,
            graphormer,
            centroids,
        }
    }

    /// Records every trainable tensor as a leaf of `tape`.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> (Vec<Var<'t>>, ModelVars<'t>) {
        let vars: Vec<Var<'t>> = self.trainable().into_iter().map(|m| tape.leaf(m.clone())).collect();
        let mv = self.vars_from(&vars);
        (vars, mv)
    }
}

/// AE pretraining output plus the frozen contrastive features.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub ae: AeParams,
    pub x_c: Matrix,
    pub ae_losses: Vec<f64>,
    pub contrastive_losses: Vec<f64>,
}

impl Pretrained {
    /// AE tensors then `X_c`, named as in [`ModelState::named`].
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = self.ae.names("ae").into_iter().zip(self.ae.tensors()).collect();
        out.push(("x_c".into(), &self.x_c));
        out
    }

    /// Artifacts shaped for `cfg` on `g`, filled from `entries`; loss traces are left empty.
    pub fn from_named(g: &Graph, cfg: &ExperimentConfig, entries: Vec<(String, Matrix)>) -> Result<Self> {
        let ladder = cfg.ladder(g.num_features())?;
        let mut out = Pretrained {
            ae: AeParams::init(&ladder, &mut stream(cfg.seed, STREAM_AE)),
            x_c: Array2::zeros(g.features().raw_dim()),
            ae_losses: Vec::new(),
            contrastive_losses: Vec::new(),
        };
        let expected: Vec<(String, (usize, usize))> = out.named().into_iter().map(|(n, m)| (n, m.dim())).collect();
        if entries.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, pretraining has {}",
                entries.len(),
                expected.len()
            )));
        }
        for ((name, value), (want, shape)) in entries.iter().zip(&expected) {
            if name != want || value.dim() != *shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match {want} {shape:?}",
                    value.dim()
                )));
            }
        }
        let mut values = entries.into_iter().map(|(_, v)| v);
        for slot in out.ae.tensors_mut() {
            *slot = values.next().expect("count checked");
        }
        out.x_c = values.next().expect("count checked");
        Ok(out)
    }
}

/// Full-batch Adam over `params`; returns the loss before each step.
fn fit<F>(params: &mut [Matrix], lr: f64, epochs: usize, what: &str, mut loss_fn: F) -> Result<Vec<f64>>
where
    F: for<'t> FnMut(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut adam = Adam::new(lr);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = loss_fn(&tape, &vars)?;
        let value = loss.scalar();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{what} loss {value} at epoch {epoch}")));
        }
        tape.backward(loss)?;
        let grads: Vec<Matrix> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        let mut refs: Vec<&mut Matrix> = params.iter_mut().collect();
        adam.step(&mut refs, &grads)?;
        losses.push(value);
    }
    Ok(losses)
}

/// Rebuilds the AE structure from tensors listed in `tensors()` order.
fn ae_from<U: Clone>(template: &AeParams, flat: &[U]) -> AeParams<U> {
    let mut it = flat.iter();
    template.map(|_| it.next().expect("one value per tensor").clone())
}

/// Trains the autoencoder alone on `‖X − X̂‖²`.
pub fn pretrain_ae(g: &Graph, cfg: &ExperimentConfig) -> Result<(AeParams, Vec<f64>)> {
    let ladder = cfg.ladder(g.num_features())?;
    let init = AeParams::init(&ladder, &mut stream(cfg.seed, STREAM_AE));
    let mut flat: Vec<Matrix> = init.tensors().into_iter().cloned().collect();
    let x = g.features().clone();
    let losses = fit(&mut flat, cfg.pretrain_lr, cfg.pretrain_epochs, "AE pretraining", |tape, vars| {
        let params = ae_from(&init, vars);
        let xv = tape.constant(x.clone());
        let out = ae_forward(&params, xv)?;
        ae_loss(xv, out.reconstruction)
    })?;
    Ok((ae_from(&init, &flat), losses))
}

/// Trains the two-layer contrastive GCN on masked views and returns
/// `X_c = enc(X)` together with the per-epoch losses.
pub fn pretrain_contrastive(g: &Graph, cfg: &ExperimentConfig) -> Result<(Matrix, Vec<f64>)> {
    let c = &cfg.contrastive;
    let mut rng = stream(cfg.seed, STREAM_CONTRASTIVE);
    let init = ContrastiveParams::init(g.num_features(), c.hidden, &mut rng);
    let adj = normalize_adjacency(g).matrix;
    let x = g.features();
    let mut flat = vec![init.w0, init.w1];
    let mut masks = Vec::with_capacity(c.epochs);
    for _ in 0..c.epochs {
        masks.push(augment_features(x, c.p, &mut rng)?);
    }
    let mut epoch = 0;
    let losses = fit(&mut flat, c.lr, c.epochs, "contrastive pretraining", |tape, vars| {
        let params = ContrastiveParams { w0: vars[0], w1: vars[1] };
        let a = tape.constant(adj.clone());
        let c1 = contrastive_encoder(a, tape.constant(x.clone()), &params)?;
        let c2 = contrastive_encoder(a, tape.constant(masks[epoch].clone()), &params)?;
        epoch += 1;
        contrastive_loss(combined_similarity(c1, c2, c.beta_sim)?, c.tau)
    })?;
    let tape = Tape::new();
    let params = ContrastiveParams {
        w0: tape.constant(flat[0].clone()),
        w1: tape.constant(flat[1].clone()),
    };
    let x_c = contrastive_encoder(tape.constant(adj), tape.constant(x.clone()), &params)?;
    Ok((x_c.value().as_ref().clone(), losses))
}

/// Both pretraining stages. Without the contrastive module `X_c` is zero.
pub fn pretrain(g: &Graph, cfg: &ExperimentConfig) -> Result<Pretrained> {
    let (ae, ae_losses) = pretrain_ae(g, cfg)?;
    let (x_c, contrastive_losses) = if cfg.ablation.uses_contrastive() {
        pretrain_contrastive(g, cfg)?
    } else {
        (Array2::zeros(g.features().raw_dim()), Vec::new())
    };
    Ok(Pretrained {
        ae,
        x_c,
        ae_losses,
        contrastive_losses,
    })
}

/// `ε·H + (1 − ε)·Z`.
pub fn fused_input<'t>(h_ae: Var<'t>, z_prev: Var<'t>, epsilon: f64) -> Result<Var<'t>> {
    if h_ae.shape() != z_prev.shape() {
        return Err(Error::dim(
            "fused_input",
            format!("{:?} vs {:?}", h_ae.shape(), z_prev.shape()),
        ));
    }
    h_ae.scale(epsilon).add(z_prev.scale(1.0 - epsilon))
}

/// Fusion weights `(λ, θ, γ)` after dropping ablated channels and
/// renormalising the rest to sum to 1.
pub fn fusion_weights(cfg: &ExperimentConfig) -> Result<(f64, f64, f64)> {
    let (l, t, g) = (cfg.lambda, cfg.theta, cfg.gamma);
    let renorm = |a: f64, b: f64| -> Result<(f64, f64)> {
        let s = a + b;
        if s > 0.0 {
            Ok((a / s, b / s))
        } else {
            Err(Error::Config(format!("{} leaves no fusion weight", cfg.ablation)))
        }
    };
    match cfg.ablation {
        Ablation::NoGcn => renorm(t, g).map(|(t, g)| (0.0, t, g)),
        Ablation::NoGraphormer => renorm(l, t).map(|(l, t)| (l, t, 0.0)),
        _ => Ok((l, t, g)),
    }
}

/// `Ã(λZ_gcn + θZ_ae + γZ_t)`; absent channels contribute nothing.
pub fn fuse_final<'t>(
    z_gcn: Option<Var<'t>>,
    z_ae: Var<'t>,
    z_t: Option<Var<'t>>,
    adj: Var<'t>,
    (lambda, theta, gamma): (f64, f64, f64),
) -> Result<Var<'t>> {
    let mut sum = z_ae.scale(theta);
    for (z, w) in [(z_gcn, lambda), (z_t, gamma)] {
        if let Some(z) = z {
            sum = sum.add(z.scale(w))?;
        }
    }
    adj.matmul(sum)
}

/// Student-t soft assignment `q_ij ∝ (1 + ‖z_i − c_j‖²/t)^{−(t+1)/2}`.
pub fn soft_assign<'t>(z: Var<'t>, centroids: Var<'t>, t: f64) -> Result<Var<'t>> {
    let kernel = z
        .pairwise_sq_dist(centroids)?
        .scale(1.0 / t)
        .add_scalar(1.0)
        .powf(-(t + 1.0) / 2.0);
    kernel.div(kernel.sum_rows())
}

/// [`soft_assign`] on plain matrices.
pub fn soft_assign_values(z: &Matrix, centroids: &Matrix, t: f64) -> Result<Matrix> {
    let tape = Tape::new();
    let q = soft_assign(tape.constant(z.clone()), tape.constant(centroids.clone()), t)?;
    Ok(q.value().as_ref().clone())
}

/// `p_ij = (q_ij²/f_j) / Σ_j′ (q_ij′²/f_j′)` with `f_j = Σ_i q_ij`.
pub fn target_distribution(q: &Matrix) -> Matrix {
    let freq = q.sum_axis(Axis(0));
    let mut p = q.mapv(|v| v * v) / &freq;
    for mut row in p.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    p
}

/// `Σ num · log(num / den)` with both arguments floored at [`KL_FLOOR`].
pub fn kl_div<'t>(num: Var<'t>, den: Var<'t>) -> Result<Var<'t>> {
    let log_ratio = num.clamp_min(KL_FLOOR).log().sub(den.clamp_min(KL_FLOOR).log())?;
    Ok(num.hadamard(log_ratio)?.reduce_sum())
}

/// [`kl_div`] on plain matrices.
pub fn kl_div_values(num: &Matrix, den: &Matrix) -> Result<f64> {
    let tape = Tape::new();
    Ok(kl_div(tape.constant(num.clone()), tape.constant(den.clone()))?.scalar())
}

/// Row-wise argmax; ties go to the smallest column.
pub fn assign_labels(q: &Matrix) -> Vec<usize> {
    q.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

/// Closed-form `∂KL(P‖Q)/∂c_j` for Student-t assignments:
/// `−((t+1)/t) Σ_i (1 + ‖z_i − c_j‖²/t)^{−1} (p_ij − q_ij)(z_i − c_j)`.
pub fn centroid_gradient(z: &Matrix, centroids: &Matrix, p: &Matrix, q: &Matrix, t: f64) -> Matrix {
    let mut grad = Array2::zeros(centroids.raw_dim());
    for (i, zi) in z.rows().into_iter().enumerate() {
        for (j, cj) in centroids.rows().into_iter().enumerate() {
            let diff = &zi - &cj;
            let d2 = diff.dot(&diff);
            let w = (p[[i, j]] - q[[i, j]]) / (1.0 + d2 / t);
            grad.row_mut(j).scaled_add(-(t + 1.0) / t * w, &diff);
        }
    }
    grad
}

/// Every intermediate of one joint forward pass.
#[derive(Debug, Clone)]
pub struct Forward<'t> {
    pub ae: AeOutput<'t>,
    pub z_gcn: Option<Var<'t>>,
    pub z_t: Option<Var<'t>>,
    pub recon_gcn: Option<Var<'t>>,
    pub recon_t: Option<Var<'t>>,
    pub z_l: Var<'t>,
    pub q: Var<'t>,
    pub q_prime: Var<'t>,
}

/// Runs an encoder/decoder stack where encoder layer `ℓ > 0` consumes the
/// AE-blended input; returns `(bottleneck, reconstruction)`.
fn channel<'t, P>(
    x0: Var<'t>,
    ae_hidden: &[Var<'t>],
    encoder: &[P],
    decoder: &[P],
    epsilon: f64,
    mut layer: impl FnMut(Var<'t>, &P, bool) -> Result<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    let mut z = x0;
    for (l, p) in encoder.iter().enumerate() {
        let input = if l == 0 { z } else { fused_input(ae_hidden[l - 1], z, epsilon)? };
        z = layer(input, p, true)?;
    }
    let bottleneck = z;
    let last = decoder.len().saturating_sub(1);
    for (l, p) in decoder.iter().enumerate() {
        z = layer(z, p, l != last)?;
    }
    Ok((bottleneck, z))
}

pub fn forward<'t>(
    tape: &'t Tape,
    vars: &ModelVars<'t>,
    prep: &Prepared,
    x_c: &Matrix,
    cfg: &ExperimentConfig,
) -> Result<Forward<'t>> {
    let x = tape.constant(prep.features.clone());
    let ae = ae_forward(&vars.ae, x)?;
    let x0 = tape.constant(&prep.features + x_c);
    let adj = tape.constant(prep.adj_norm.clone());

    let (z_gcn, recon_gcn) = match &vars.gcn {
        Some(p) => {
            let (z, r) = channel(x0, &ae.hidden, &p.encoder, &p.decoder, cfg.epsilon, |z, w, act| {
                gcn_layer(adj, z, *w, act)
            })?;
            (Some(z), Some(r))
        }
        None => (None, None),
    };
    let (z_t, recon_t) = match &vars.graphormer {
        Some(p) => {
            let c = tape.constant(prep.centrality.clone());
            let heads = p.heads;
            let (z, r) = channel(x0, &ae.hidden, &p.encoder, &p.decoder, cfg.epsilon, |z, proj, act| {
                graphormer_layer(z, c, &prep.rows, proj, heads, act)
            })?;
            (Some(z), Some(r))
        }
        None => (None, None),
    };

    let z_l = fuse_final(z_gcn, ae.bottleneck(), z_t, adj, fusion_weights(cfg)?)?;
    let q = soft_assign(z_l, vars.centroids, cfg.t)?;
    let q_prime = soft_assign(ae.bottleneck(), vars.centroids, cfg.t)?;
    Ok(Forward {
        ae,
        z_gcn,
        z_t,
        recon_gcn,
        recon_t,
        z_l,
        q,
        q_prime,
    })
}

/// Scalar loss components of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub ae: f64,
    pub w: f64,
    pub a1: f64,
    pub a2: f64,
    pub clu: f64,
    pub con: f64,
}

impl LossBreakdown {
    /// Recombines the components with the given loss weights.
    pub fn reassemble(&self, alpha: f64, beta: f64) -> f64 {
        (self.w + (self.a1 + self.a2) * ADJ_LOSS_WEIGHT) + self.ae + self.clu * alpha + self.con * beta
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.ae, self.w, self.a1, self.a2, self.clu, self.con]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L={} L_AE={} L_w={} L_a1={} L_a2={} L_clu={} L_con={}",
            self.total, self.ae, self.w, self.a1, self.a2, self.clu, self.con
        )
    }
}

/// Joint loss for a completed forward pass and a fixed target `p`.
pub fn loss_total<'t>(
    fw: &Forward<'t>,
    p: &Matrix,
    prep: &Prepared,
    cfg: &ExperimentConfig,
) -> Result<(Var<'t>, LossBreakdown)> {
    let tape = fw.q.tape();
    let target_w = tape.constant(prep.target_w.clone());
    let target_ae = tape.constant(prep.target_ae.clone());
    let adjacency = tape.constant(prep.adjacency.clone());

    let l_w = match (fw.recon_gcn, fw.recon_t) {
        (Some(a), Some(b)) => Some(a.add(b)?.scale(0.5).mse(target_w)?),
        (Some(r), None) | (None, Some(r)) => Some(r.mse(target_w)?),
        (None, None) => None,
    };
    let adj_loss = |z: Option<Var<'t>>| -> Result<Option<Var<'t>>> {
        z.map(|z| inner_product_decode(z)?.mse(adjacency)).transpose()
    };
    let l_a1 = adj_loss(fw.z_gcn)?;
    let l_a2 = adj_loss(fw.z_t)?;
    let l_ae = fw.ae.reconstruction.mse(target_ae)?;
    let l_clu = kl_div(tape.constant(p.clone()), fw.q)?;
    let l_con = kl_div(fw.q, fw.q_prime)?;

    // Same association order as `LossBreakdown::reassemble`.
    let zero = tape.constant(Array2::zeros((1, 1)));
    let or_zero = |x: Option<Var<'t>>| x.unwrap_or(zero);
    let l_g = or_zero(l_w).add(or_zero(l_a1).add(or_zero(l_a2))?.scale(ADJ_LOSS_WEIGHT))?;
    let total = l_g
        .add(l_ae)?
        .add(l_clu.scale(cfg.alpha))?
        .add(l_con.scale(cfg.beta))?;
    let v = |x: Option<Var<'t>>| x.map_or(0.0, |x| x.scalar());
    let breakdown = LossBreakdown {
        total: total.scalar(),
        ae: l_ae.scalar(),
        w: v(l_w),
        a1: v(l_a1),
        a2: v(l_a2),
        clu: l_clu.scalar(),
        con: l_con.scalar(),
    };
    Ok((total, breakdown))
}

/// Loss components of `state` without updating it.
pub fn evaluate_loss(state: &ModelState, prep: &Prepared, cfg: &ExperimentConfig) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let consts: Vec<Var<'_>> = state.trainable().into_iter().map(|m| tape.constant(m.clone())).collect();
    let vars = state.vars_from(&consts);
    let fw = forward(&tape, &vars, prep, &state.x_c, cfg)?;
    let p = target_distribution(&fw.q.value());
    Ok(loss_total(&fw, &p, prep, cfg)?.1)
}

/// Soft assignment `Q` of the current state.
pub fn predict(state: &ModelState, prep: &Prepared, cfg: &ExperimentConfig) -> Result<Matrix> {
    let tape = Tape::new();
    let consts: Vec<Var<'_>> = state.trainable().into_iter().map(|m| tape.constant(m.clone())).collect();
    let vars = state.vars_from(&consts);
    let fw = forward(&tape, &vars, prep, &state.x_c, cfg)?;
    Ok(fw.q.value().as_ref().clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub metrics: Option<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub const HEADER: &'static str = "epoch,L,L_AE,L_w,L_a1,L_a2,L_clu,L_con,acc,nmi,ari,f1";

    /// CSV with [`HEADER`](Self::HEADER); metric cells are empty without labels.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let l = &r.loss;
            let _ = write!(s, "{}", r.epoch);
            for v in [l.total, l.ae, l.w, l.a1, l.a2, l.clu, l.con] {
                let _ = write!(s, ",{}", fmt_f64(v));
            }
            match &r.metrics {
                Some(m) => {
                    for v in [m.acc, m.nmi, m.ari, m.f1] {
                        let _ = write!(s, ",{}", fmt_f64(v));
                    }
                }
                None => s.push_str(",,,,"),
            }
            s.push('\n');
        }
        s
    }
}

/// Per-epoch snapshot handed to a [`TrainOptions::observer`].
#[derive(Debug)]
pub struct EpochView<'a> {
    pub epoch: usize,
    pub q: &'a Matrix,
    pub q_prime: &'a Matrix,
    pub p: &'a Matrix,
    pub z_l: &'a Matrix,
    pub centroids: &'a Matrix,
    /// Tape gradient of `KL(P‖Q)` w.r.t. the centroids with `Z_L` held fixed.
    pub clu_centroid_grad: &'a Matrix,
    pub loss: &'a LossBreakdown,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where to write the last finite state if training hits a non-finite loss.
    pub failure_checkpoint: Option<PathBuf>,
    pub observer: Option<&'a mut dyn FnMut(&EpochView<'_>)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: ModelState,
    pub history: History,
    pub labels: Vec<usize>,
    /// Final soft assignment the labels were read from.
    pub q: Matrix,
    /// KMeans labels on the pretrained AE bottleneck.
    pub kmeans_labels: Vec<usize>,
    /// Metrics of `labels` when the graph has ground truth.
    pub metrics: Option<MetricRow>,
    pub pretrained: Pretrained,
}

/// KMeans centroids on the AE bottleneck of `ae`.
fn init_centroids(ae: &AeParams, prep: &Prepared, cfg: &ExperimentConfig) -> Result<(Matrix, Vec<usize>)> {
    let tape = Tape::new();
    let vars = ae.map(|m| tape.constant(m.clone()));
    let h = ae_forward(&vars, tape.constant(prep.features.clone()))?.bottleneck().value();
    let km = kmeans(&h, cfg.k, cfg.kmeans_restarts, cfg.seed)?;
    Ok((km.centroids, km.labels))
}

fn clu_centroid_grad(z_l: &Matrix, centroids: &Matrix, p: &Matrix, t: f64) -> Result<Matrix> {
    let tape = Tape::new();
    let mu = tape.leaf(centroids.clone());
    let q = soft_assign(tape.constant(z_l.clone()), mu, t)?;
    let loss = kl_div(tape.constant(p.clone()), q)?;
    tape.backward(loss)?;
    Ok(tape.grad_or_zeros(mu))
}

fn evaluate_labels(g: &Graph, labels: &[usize], cfg: &ExperimentConfig) -> Result<Option<MetricRow>> {
    g.labels()
        .map(|truth| MetricRow::evaluate_with(labels, truth, cfg.nmi))
        .transpose()
}

/// Pretrains, then runs the joint loop.
pub fn train(g: &Graph, cfg: &ExperimentConfig) -> Result<TrainOutput> {
    let pre = pretrain(g, cfg)?;
    train_from(g, cfg, pre, TrainOptions::default())
}

/// Joint loop on top of existing pretraining artifacts.
pub fn train_from(g: &Graph, cfg: &ExperimentConfig, pre: Pretrained, mut opts: TrainOptions<'_>) -> Result<TrainOutput> {
    cfg.validate_model()?;
    let prep = Prepared::new(g, cfg)?;
    if pre.ae.encoder.len() != prep.ladder.depth() || pre.x_c.dim() != prep.features.dim() {
        return Err(Error::Config("pretrained artifacts do not match the configured model".into()));
    }
    let (centroids, kmeans_labels) = init_centroids(&pre.ae, &prep, cfg)?;
    let x_c = if cfg.ablation.uses_contrastive() {
        pre.x_c.clone()
    } else {
        Array2::zeros(prep.features.raw_dim())
    };
    let mut state = ModelState::init(&prep, cfg, pre.ae.clone(), x_c, centroids);
    let mut adam = Adam::new(cfg.lr);
    let mut history = History::default();

    for epoch in 0..cfg.epochs {
        let tape = Tape::new();
        let (leaves, vars) = state.leaves(&tape);
        let fw = forward(&tape, &vars, &prep, &state.x_c, cfg)?;
        let q = fw.q.value();
        let p = target_distribution(&q);
        let (loss, breakdown) = loss_total(&fw, &p, &prep, cfg)?;
        if !breakdown.is_finite() {
            return Err(abort(&state, &opts, format!("epoch {epoch}: {breakdown}")));
        }
        let labels = assign_labels(&q);
        history.rows.push(HistoryRow {
            epoch,
            loss: breakdown,
            metrics: evaluate_labels(g, &labels, cfg)?,
        });
        if let Some(obs) = opts.observer.as_mut() {
            let z_l = fw.z_l.value();
            let grad = clu_centroid_grad(&z_l, &state.centroids, &p, cfg.t)?;
            obs(&EpochView {
                epoch,
                q: &q,
                q_prime: &fw.q_prime.value(),
                p: &p,
                z_l: &z_l,
                centroids: &state.centroids,
                clu_centroid_grad: &grad,
                loss: &breakdown,
            });
        }
        tape.backward(loss)?;
        let grads: Vec<Matrix> = leaves.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(abort(&state, &opts, format!("epoch {epoch}: non-finite gradient; {breakdown}")));
        }
        adam.step(&mut state.trainable_mut(), &grads)?;
    }

    let q = predict(&state, &prep, cfg)?;
    let labels = assign_labels(&q);
    let metrics = evaluate_labels(g, &labels, cfg)?;
    Ok(TrainOutput {
        state,
        history,
        labels,
        q,
        kmeans_labels,
        metrics,
        pretrained: pre,
    })
}

fn abort(state: &ModelState, opts: &TrainOptions<'_>, msg: String) -> Error {
    if let Some(path) = &opts.failure_checkpoint {
        if let Err(e) = crate::checkpoint::save_state(state, path) {
            return Error::NonFinite(format!("{msg} (checkpoint failed: {e})"));
        }
        return Error::NonFinite(format!("{msg}; last finite state written to {}", path.display()));
    }
    Error::NonFinite(msg)
}

/// Trains `variant` of the model and scores it against the graph's labels.
pub fn ablate(g: &Graph, cfg: &ExperimentConfig, variant: Ablation) -> Result<MetricRow> {
    let mut cfg = cfg.clone();
    cfg.ablation = variant;
    let out = train(g, &cfg)?;
    out.metrics
        .ok_or_else(|| Error::Config("ablation needs a labelled graph".into()))
}

impl ExperimentConfig {
    /// Model-level checks that do not involve the data source.
    pub fn validate_model(&self) -> Result<()> {
        self.validate_params()?;
        fusion_weights(self).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::config::{DataSource, SbmConfig};
    use ndarray::array;
    use rand::Rng;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Sbm(SbmConfig {
                blocks: vec![8, 8],
                p_in: 0.5,
                p_out: 0.05,
                features: 6,
                ..SbmConfig::default()
            }),
            k: 2,
            n_z: 3,
            widths: [8, 8, 12],
            epochs: 5,
            lr: 1e-3,
            pretrain_epochs: 10,
            kmeans_restarts: 3,
            contrastive: crate::config::ContrastiveConfig {
                hidden: 8,
                epochs: 10,
                ..Default::default()
            },
            seed: 11,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn soft_assign_examples() {
        let q = soft_assign_values(&array![[1.0, 2.0]], &array![[0.0, 0.0]], 1.0).unwrap();
        assert_eq!(q, array![[1.0]]);
        let q = soft_assign_values(&array![[0.0]], &array![[1.0], [-1.0]], 1.0).unwrap();
        assert_eq!(q, array![[0.5, 0.5]]);
        let q = soft_assign_values(&array![[0.0]], &array![[0.0], [1.0]], 1.0).unwrap();
        assert!((q[[0, 0]] - 2.0 / 3.0).abs() < 1e-15 && (q[[0, 1]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn target_examples() {
        let p = target_distribution(&array![[0.8, 0.2], [0.2, 0.8]]);
        assert!((p[[0, 0]] - 16.0 / 17.0).abs() < 1e-15);
        assert!((p[[1, 0]] - 1.0 / 17.0).abs() < 1e-15);
        let u = Array2::from_elem((3, 4), 0.25);
        assert_eq!(target_distribution(&u), u);
    }

    #[test]
    fn kl_examples() {
        let q = array![[0.3, 0.7], [0.5, 0.5]];
        assert_eq!(kl_div_values(&q, &q).unwrap(), 0.0);
        let d = 1e-12;
        let v = kl_div_values(&array![[1.0 - d, d]], &array![[0.5, 0.5]]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn kl_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut stochastic = || {
            let mut m = Array2::from_shape_simple_fn((5, 3), || rng.random_range(0.01..1.0));
            for mut r in m.rows_mut() {
                let s = r.sum();
                r /= s;
            }
            m
        };
        for _ in 0..100 {
            let (a, b) = (stochastic(), stochastic());
            assert!(kl_div_values(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn labels_tie_to_smallest() {
        assert_eq!(assign_labels(&array![[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]]), vec![0, 0, 1]);
    }

    #[test]
    fn fused_input_examples() {
        let tape = Tape::new();
        let h = tape.constant(array![[2.0, 4.0]]);
        let z = tape.constant(array![[0.0, 0.0]]);
        assert_eq!(*fused_input(h, z, 0.5).unwrap().value(), array![[1.0, 2.0]]);
        assert_eq!(*fused_input(h, z, 0.0).unwrap().value(), array![[0.0, 0.0]]);
        assert_eq!(*fused_input(h, z, 1.0).unwrap().value(), array![[2.0, 4.0]]);
        assert!(fused_input(h, tape.constant(array![[1.0]]), 0.5).is_err());
    }

    #[test]
    fn fuse_final_identity_adjacency() {
        let tape = Tape::new();
        let eye = tape.constant(Array2::eye(2));
        let zg = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let other = tape.constant(array![[9.0, 9.0], [9.0, 9.0]]);
        let out = fuse_final(Some(zg), other, Some(other), eye, (1.0, 0.0, 0.0)).unwrap();
        assert_eq!(*out.value(), *zg.value());
        let out = fuse_final(Some(other), other, Some(other), eye, (0.2, 0.3, 0.5)).unwrap();
        for (a, b) in out.value().iter().zip(other.value().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ablation_weights_renormalise() {
        let mut cfg = ExperimentConfig { lambda: 0.4, theta: 0.1, gamma: 0.5, ..Default::default() };
        cfg.ablation = Ablation::NoGcn;
        let (l, t, g) = fusion_weights(&cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!((t + g - 1.0).abs() < 1e-15 && (t - 1.0 / 6.0).abs() < 1e-15);
        cfg.ablation = Ablation::NoGraphormer;
        let (l, t, g) = fusion_weights(&cfg).unwrap();
        assert_eq!(g, 0.0);
        assert!((l - 0.8).abs() < 1e-15 && (t - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ablation_names() {
        for a in Ablation::ALL {
            assert_eq!(a.key().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!("-Contrastive Learning".parse::<Ablation>().unwrap(), Ablation::NoContrastive);
        assert!("-AE".parse::<Ablation>().is_err());
    }

    #[test]
    fn centroid_gradient_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Array2::from_shape_simple_fn((7, 3), || rng.random_range(-2.0..2.0));
        let mu = Array2::from_shape_simple_fn((3, 3), || rng.random_range(-2.0..2.0));
        let q = soft_assign_values(&z, &mu, 1.0).unwrap();
        let p = target_distribution(&q);
        let tape_grad = clu_centroid_grad(&z, &mu, &p, 1.0).unwrap();
        let analytic = centroid_gradient(&z, &mu, &p, &q, 1.0);
        for (a, b) in analytic.iter().zip(&tape_grad) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!(centroid_gradient(&z, &mu, &q, &q, 1.0).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn pretrain_ae_decreases_and_repeats() {
        let cfg = small_cfg();
        let g = cfg.load_graph().unwrap();
        let (a, losses) = pretrain_ae(&g, &cfg).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let (b, again) = pretrain_ae(&g, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(losses, again);
    }

    #[test]
    fn pretrain_ae_zero_features() {
        let cfg = small_cfg();
        let g = cfg.load_graph().unwrap();
        let g = g.with_features(Array2::zeros((16, 6))).unwrap();
        let (_, losses) = pretrain_ae(&g, &cfg).unwrap();
        assert!(losses.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn contrastive_pretraining_improves() {
        let mut cfg = small_cfg();
        cfg.contrastive.epochs = 50;
        let g = cfg.load_graph().unwrap();
        let (xc, losses) = pretrain_contrastive(&g, &cfg).unwrap();
        assert_eq!(xc.dim(), (16, 6));
        assert!(losses.last().unwrap() < &losses[0]);
        assert_eq!(pretrain_contrastive(&g, &cfg).unwrap().0, xc);
    }

    #[test]
    fn joint_loss_reassembles() {
        let cfg = small_cfg();
        let g = cfg.load_graph().unwrap();
        let out = train(&g, &cfg).unwrap();
        for row in &out.history.rows {
            let l = &row.loss;
            assert!((l.reassemble(cfg.alpha, cfg.beta) - l.total).abs() < 1e-12);
            assert!(l.clu >= 0.0 && l.con >= 0.0);
        }
        assert_eq!(out.history.rows.len(), cfg.epochs);
    }

    #[test]
    fn zero_weights_leave_reconstruction() {
        let mut cfg = small_cfg();
        cfg.alpha = 0.0;
        cfg.beta = 0.0;
        cfg.epochs = 2;
        let g = cfg.load_graph().unwrap();
        let out = train(&g, &cfg).unwrap();
        for row in &out.history.rows {
            let l = &row.loss;
            assert_eq!(l.total, (l.w + (l.a1 + l.a2) * 0.1) + l.ae);
        }
    }

    #[test]
    fn zero_epochs_use_initial_assignment() {
        let mut cfg = small_cfg();
        cfg.epochs = 0;
        let g = cfg.load_graph().unwrap();
        let out = train(&g, &cfg).unwrap();
        assert!(out.history.rows.is_empty());
        let prep = Prepared::new(&g, &cfg).unwrap();
        let q = predict(&out.state, &prep, &cfg).unwrap();
        assert_eq!(out.labels, assign_labels(&q));
        assert_eq!(out.state.centroids.nrows(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_cfg();
        let g = cfg.load_graph().unwrap();
        let a = train(&g, &cfg).unwrap();
        let b = train(&g, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.history.to_csv(), b.history.to_csv());
    }

    #[test]
    fn ablated_models_drop_channels() {
        let mut cfg = small_cfg();
        cfg.epochs = 2;
        let g = cfg.load_graph().unwrap();
        cfg.ablation = Ablation::NoGcn;
        let out = train(&g, &cfg).unwrap();
        assert!(out.state.gcn.is_none() && out.state.graphormer.is_some());
        assert!(out.history.rows.iter().all(|r| r.loss.a1 == 0.0));
        cfg.ablation = Ablation::NoGraphormer;
        let out = train(&g, &cfg).unwrap();
        assert!(out.state.graphormer.is_none());
        assert!(out.history.rows.iter().all(|r| r.loss.a2 == 0.0));
        cfg.ablation = Ablation::NoContrastive;
        let out = train(&g, &cfg).unwrap();
        assert!(out.state.x_c.iter().all(|&v| v == 0.0));
        cfg.contrastive.p = 0.7;
        let again = train(&g, &cfg).unwrap();
        assert_eq!(out.history, again.history);
    }

    #[test]
    fn named_tensors_round_trip() {
        let cfg = small_cfg();
        let g = cfg.load_graph().unwrap();
        let mut cfg0 = cfg.clone();
        cfg0.epochs = 1;
        let out = train(&g, &cfg0).unwrap();
        let entries: Vec<(String, Matrix)> = out.state.named().into_iter().map(|(n, m)| (n, m.clone())).collect();
        let mut blank = out.state.clone();
        blank.centroids.fill(0.0);
        blank.load_named(entries.clone()).unwrap();
        assert_eq!(blank, out.state);
        let mut short = entries;
        short.pop();
        assert!(blank.load_named(short).is_err());
    }

    #[test]
    fn composite_gradient_small() {
        let mut cfg = small_cfg();
        cfg.widths = [4, 4, 5];
        cfg.data = DataSource::Sbm(SbmConfig {
            blocks: vec![3, 3],
            p_in: 0.8,
            p_out: 0.2,
            features: 4,
            ..SbmConfig::default()
        });
        let g = cfg.load_graph().unwrap();
        let prep = Prepared::new(&g, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ae = AeParams::init(&prep.ladder, &mut rng);
        for b in ae.encoder.iter_mut().chain(&mut ae.decoder) {
            b.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let x_c = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-0.5..0.5));
        let mu = Array2::from_shape_simple_fn((2, 3), || rng.random_range(-1.0..1.0));
        let state = ModelState::init(&prep, &cfg, ae, x_c, mu);
        let p = target_distribution(&predict(&state, &prep, &cfg).unwrap());
        let params: Vec<Matrix> = state.trainable().into_iter().cloned().collect();
        let err = finite_difference_check(
            |tape, vars| {
                let mv = state.vars_from(vars);
                let fw = forward(tape, &mv, &prep, &state.x_c, &cfg)?;
                Ok(loss_total(&fw, &p, &prep, &cfg)?.0)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
