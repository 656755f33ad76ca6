//! Forward architectures: autoencoder, GCN, centrality-encoded graph
//! attention and the contrastive encoder, plus the similarity/loss pieces the
//! contrastive pretraining needs.
//!
//! Parameter containers are generic over their leaf type so the same
//! structure can hold matrices, tape variables or gradients. `map` converts
//! between them and `tensors`/`tensors_mut` flatten in a fixed order.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution};

use crate::autodiff::{Var, DEFAULT_LEAKY_SLOPE};
use crate::centrality::SpatialBias;
use crate::{Error, Matrix, Result};

/// Norm floor in cosine similarity denominators.
pub const SIMILARITY_EPS: f64 = 1e-12;

/// Glorot-uniform matrix in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..=limit))
}

/// Layer widths from input to bottleneck, e.g. `[f, 500, 500, 2000, n_z]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ladder(Vec<usize>);

impl Ladder {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer ladder {dims:?}")));
        }
        Ok(Self(dims))
    }

    /// Ladder `[input, hidden..., bottleneck]`.
    pub fn from_parts(input: usize, hidden: &[usize], bottleneck: usize) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(bottleneck);
        Self::new(dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len() - 1
    }

    pub fn input(&self) -> usize {
        self.0[0]
    }

    pub fn bottleneck(&self) -> usize {
        *self.0.last().unwrap()
    }

    /// `(fan_in, fan_out)` of each encoder layer.
    pub fn encoder_shapes(&self) -> Vec<(usize, usize)> {
        self.0.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// `(fan_in, fan_out)` of each decoder layer, mirroring the encoder.
    pub fn decoder_shapes(&self) -> Vec<(usize, usize)> {
        self.0.windows(2).rev().map(|w| (w[1], w[0])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

/// Autoencoder weights; `decoder[0]` consumes the bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct AeParams<T = Matrix> {
    pub encoder: Vec<Linear<T>>,
    pub decoder: Vec<Linear<T>>,
}

impl AeParams {
    pub fn init<R: Rng + ?Sized>(ladder: &Ladder, rng: &mut R) -> Self {
        let mut dense = |(i, o): (usize, usize)| Linear {
            weight: glorot(rng, i, o),
            bias: Array2::zeros((1, o)),
        };
        let encoder = ladder.encoder_shapes().into_iter().map(&mut dense).collect();
        let decoder = ladder.decoder_shapes().into_iter().map(&mut dense).collect();
        Self { encoder, decoder }
    }
}

impl<T> AeParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AeParams<U> {
        AeParams {
            encoder: self.encoder.iter().map(|l| l.map(&mut f)).collect(),
            decoder: self.decoder.iter().map(|l| l.map(&mut f)).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        self.encoder
            .iter_mut()
            .chain(&mut self.decoder)
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn names(&self, prefix: &str) -> Vec<String> {
        let side = |tag: &str, layers: &[Linear<T>]| -> Vec<String> {
            (0..layers.len())
                .flat_map(|i| {
                    [
                        format!("{prefix}.{tag}.{i}.weight"),
                        format!("{prefix}.{tag}.{i}.bias"),
                    ]
                })
                .collect()
        };
        let mut out = side("encoder", &self.encoder);
        out.extend(side("decoder", &self.decoder));
        out
    }
}

/// Per-layer outputs of [`ae_forward`].
#[derive(Debug, Clone)]
pub struct AeOutput<'t> {
    /// Encoder outputs `H^(1) .. H^(L)`; the last one is the bottleneck.
    pub hidden: Vec<Var<'t>>,
    pub reconstruction: Var<'t>,
}

impl<'t> AeOutput<'t> {
    pub fn bottleneck(&self) -> Var<'t> {
        *self.hidden.last().expect("at least one encoder layer")
    }
}

pub fn ae_forward<'t>(params: &AeParams<Var<'t>>, x: Var<'t>) -> Result<AeOutput<'t>> {
    let mut hidden = Vec::with_capacity(params.encoder.len());
    let mut h = x;
    for layer in &params.encoder {
        h = h.matmul(layer.weight)?.add(layer.bias)?.leaky_relu(DEFAULT_LEAKY_SLOPE);
        hidden.push(h);
    }
    let last = params.decoder.len().saturating_sub(1);
    for (i, layer) in params.decoder.iter().enumerate() {
        h = h.matmul(layer.weight)?.add(layer.bias)?;
        if i != last {
            h = h.leaky_relu(DEFAULT_LEAKY_SLOPE);
        }
    }
    Ok(AeOutput {
        hidden,
        reconstruction: h,
    })
}

/// `(1 / 2N) Σ_i ‖x_i − x̂_i‖²`.
pub fn ae_loss<'t>(x: Var<'t>, reconstruction: Var<'t>) -> Result<Var<'t>> {
    let n = x.shape().0.max(1) as f64;
    Ok(x.sub(reconstruction)?.square().reduce_sum().scale(0.5 / n))
}

/// `LeakyReLU(Ã·Z·W)` or, with `activate = false`, the bare product.
pub fn gcn_layer<'t>(adj: Var<'t>, z: Var<'t>, weight: Var<'t>, activate: bool) -> Result<Var<'t>> {
    let out = adj.matmul(z)?.matmul(weight)?;
    Ok(if activate {
        out.leaky_relu(DEFAULT_LEAKY_SLOPE)
    } else {
        out
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams<T = Matrix> {
    pub encoder: Vec<T>,
    pub decoder: Vec<T>,
}

impl GcnParams {
    pub fn init<R: Rng + ?Sized>(ladder: &Ladder, rng: &mut R) -> Self {
        let encoder = ladder
            .encoder_shapes()
            .into_iter()
            .map(|(i, o)| glorot(rng, i, o))
            .collect();
        let decoder = ladder
            .decoder_shapes()
            .into_iter()
            .map(|(i, o)| glorot(rng, i, o))
            .collect();
        Self { encoder, decoder }
    }
}

impl<T> GcnParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> GcnParams<U> {
        GcnParams {
            encoder: self.encoder.iter().map(&mut f).collect(),
            decoder: self.decoder.iter().map(&mut f).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        self.encoder.iter().chain(&self.decoder).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        self.encoder.iter_mut().chain(&mut self.decoder).collect()
    }

    pub fn names(&self, prefix: &str) -> Vec<String> {
        (0..self.encoder.len())
            .map(|i| format!("{prefix}.encoder.{i}.weight"))
            .chain((0..self.decoder.len()).map(|i| format!("{prefix}.decoder.{i}.weight")))
            .collect()
    }
}

/// Key/query/value projections of one attention layer, each split into a
/// node-feature part and a centrality part.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProjections<T> {
    pub key: T,
    pub query: T,
    pub value: T,
    pub centrality_key: T,
    pub centrality_query: T,
    pub centrality_value: T,
}

impl<T> AttentionProjections<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionProjections<U> {
        AttentionProjections {
            key: f(&self.key),
            query: f(&self.query),
            value: f(&self.value),
            centrality_key: f(&self.centrality_key),
            centrality_query: f(&self.centrality_query),
            centrality_value: f(&self.centrality_value),
        }
    }

    pub fn refs(&self) -> [&T; 6] {
        [
            &self.key,
            &self.query,
            &self.value,
            &self.centrality_key,
            &self.centrality_query,
            &self.centrality_value,
        ]
    }

    pub fn refs_mut(&mut self) -> [&mut T; 6] {
        [
            &mut self.key,
            &mut self.query,
            &mut self.value,
            &mut self.centrality_key,
            &mut self.centrality_query,
            &mut self.centrality_value,
        ]
    }

    const NAMES: [&'static str; 6] = ["key", "query", "value", "c_key", "c_query", "c_value"];
}

impl AttentionProjections<Matrix> {
    fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize, m: usize, heads: usize) -> Self {
        let w = heads * d_out;
        Self {
            key: glorot(rng, d_in, w),
            query: glorot(rng, d_in, w),
            value: glorot(rng, d_in, w),
            centrality_key: glorot(rng, m, w),
            centrality_query: glorot(rng, m, w),
            centrality_value: glorot(rng, m, w),
        }
    }
}

/// Graph-attention weights for encoder and mirrored decoder.
///
/// Every head has width equal to the layer's output width; heads are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphormerParams<T = Matrix> {
    pub heads: usize,
    pub encoder: Vec<AttentionProjections<T>>,
    pub decoder: Vec<AttentionProjections<T>>,
}

impl GraphormerParams {
    pub fn init<R: Rng + ?Sized>(ladder: &Ladder, centrality_width: usize, heads: usize, rng: &mut R) -> Self {
        let encoder = ladder
            .encoder_shapes()
            .into_iter()
            .map(|(i, o)| AttentionProjections::init(rng, i, o, centrality_width, heads))
            .collect();
        let decoder = ladder
            .decoder_shapes()
            .into_iter()
            .map(|(i, o)| AttentionProjections::init(rng, i, o, centrality_width, heads))
            .collect();
        Self {
            heads,
            encoder,
            decoder,
        }
    }
}

impl<T> GraphormerParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> GraphormerParams<U> {
        GraphormerParams {
            heads: self.heads,
            encoder: self.encoder.iter().map(|l| l.map(&mut f)).collect(),
            decoder: self.decoder.iter().map(|l| l.map(&mut f)).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        self.encoder.iter().chain(&self.decoder).flat_map(|l| l.refs()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        self.encoder
            .iter_mut()
            .chain(&mut self.decoder)
            .flat_map(|l| l.refs_mut())
            .collect()
    }

    pub fn names(&self, prefix: &str) -> Vec<String> {
        let side = |tag: &str, n: usize| -> Vec<String> {
            (0..n)
                .flat_map(|i| {
                    AttentionProjections::<T>::NAMES
                        .iter()
                        .map(move |p| format!("{prefix}.{tag}.{i}.{p}"))
                })
                .collect()
        };
        let mut out = side("encoder", self.encoder.len());
        out.extend(side("decoder", self.decoder.len()));
        out
    }
}

/// Sign applied to the spatial bias before it enters the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialSign {
    Plus,
    Minus,
}

impl SpatialSign {
    pub fn factor(self) -> f64 {
        match self {
            SpatialSign::Plus => 1.0,
            SpatialSign::Minus => -1.0,
        }
    }
}

impl std::fmt::Display for SpatialSign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpatialSign::Plus => "+",
            SpatialSign::Minus => "-",
        })
    }
}

impl std::str::FromStr for SpatialSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "+" | "plus" => Ok(SpatialSign::Plus),
            "-" | "minus" => Ok(SpatialSign::Minus),
            other => Err(Error::Config(format!("unknown spatial sign {other:?}"))),
        }
    }
}

/// Attention neighbourhoods with signed bias, ready for
/// [`crate::autodiff::Tape::neighbor_attention`].
pub fn attention_rows(bias: &SpatialBias, sign: SpatialSign) -> Rc<Vec<Vec<(usize, f64)>>> {
    let f = sign.factor();
    Rc::new(
        (0..bias.num_nodes())
            .map(|i| bias.row(i).iter().map(|&(j, d)| (j, f * d)).collect())
            .collect(),
    )
}

/// One centrality-encoded attention layer.
///
/// `K = Z·W_key + C·W_c_key` (likewise `Q`, `V`); logits
/// `q_i·k_j / sqrt(d) + bias_ij` over each node's neighbourhood including
/// itself; heads averaged; Leaky ReLU when `activate`.
pub fn graphormer_layer<'t>(
    z: Var<'t>,
    centrality: Var<'t>,
    rows: &Rc<Vec<Vec<(usize, f64)>>>,
    proj: &AttentionProjections<Var<'t>>,
    heads: usize,
    activate: bool,
) -> Result<Var<'t>> {
    let out = graphormer_attention(z, centrality, rows, proj, heads)?;
    Ok(if activate {
        out.leaky_relu(DEFAULT_LEAKY_SLOPE)
    } else {
        out
    })
}

/// Pre-activation output of [`graphormer_layer`]; the returned node carries
/// the attention weights (see [`crate::autodiff::Tape::attention_weights`]).
pub fn graphormer_attention<'t>(
    z: Var<'t>,
    centrality: Var<'t>,
    rows: &Rc<Vec<Vec<(usize, f64)>>>,
    proj: &AttentionProjections<Var<'t>>,
    heads: usize,
) -> Result<Var<'t>> {
    if centrality.shape().0 != z.shape().0 {
        return Err(Error::dim(
            "graphormer_layer",
            format!("{} centrality rows for {} nodes", centrality.shape().0, z.shape().0),
        ));
    }
    let project = |w: Var<'t>, wc: Var<'t>| -> Result<Var<'t>> {
        z.matmul(w)?.add(centrality.matmul(wc)?)
    };
    let k = project(proj.key, proj.centrality_key)?;
    let q = project(proj.query, proj.centrality_query)?;
    let v = project(proj.value, proj.centrality_value)?;
    z.tape().neighbor_attention(q, k, v, heads, Rc::clone(rows))
}

/// `X ⊙ M` with `M_ij ~ Bernoulli(1 − p)`, drawn row-major from `rng`.
pub fn augment_features<R: Rng + ?Sized>(x: &Matrix, p: f64, rng: &mut R) -> Result<Matrix> {
    let keep = Bernoulli::new(1.0 - p)
        .map_err(|_| Error::Config(format!("mask drop rate {p} outside [0, 1]")))?;
    let mut out = x.clone();
    for v in out.iter_mut() {
        if !keep.sample(rng) {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Two-layer GCN used for contrastive pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveParams<T = Matrix> {
    pub w0: T,
    pub w1: T,
}

impl ContrastiveParams {
    /// `f × hidden` then `hidden × f`, so the output can be added to `X`.
    pub fn init<R: Rng + ?Sized>(features: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w0: glorot(rng, features, hidden),
            w1: glorot(rng, hidden, features),
        }
    }
}

impl<T> ContrastiveParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ContrastiveParams<U> {
        ContrastiveParams {
            w0: f(&self.w0),
            w1: f(&self.w1),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        vec![&mut self.w0, &mut self.w1]
    }
}

/// `Ã·ReLU(Ã·X·W0)·W1`.
pub fn contrastive_encoder<'t>(adj: Var<'t>, x: Var<'t>, params: &ContrastiveParams<Var<'t>>) -> Result<Var<'t>> {
    let hidden = adj.matmul(x)?.matmul(params.w0)?.relu();
    adj.matmul(hidden)?.matmul(params.w1)
}

/// Pairwise `sgn(b)|b|^β` with `b = cos(C1_a, C2_b) / (1 + ‖C1_a − C2_b‖)`.
pub fn combined_similarity<'t>(c1: Var<'t>, c2: Var<'t>, beta_sim: f64) -> Result<Var<'t>> {
    let eps2 = SIMILARITY_EPS * SIMILARITY_EPS;
    let n1 = c1.square().sum_rows().add_scalar(eps2).sqrt();
    let n2 = c2.square().sum_rows().add_scalar(eps2).sqrt();
    let cos = c1
        .matmul(c2.transpose())?
        .div(n1.matmul(n2.transpose())?)?;
    let euc = c1.pairwise_dist(c2)?.add_scalar(1.0);
    let base = cos.div(euc)?;
    Ok(if beta_sim == 1.0 {
        base
    } else {
        base.signed_pow(beta_sim)
    })
}

/// Row-wise cross-entropy of `softmax(S/τ)` against the diagonal.
pub fn contrastive_loss<'t>(similarity: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let (n, m) = similarity.shape();
    if n != m {
        return Err(Error::dim("contrastive_loss", format!("{n}x{m} is not square")));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let logits = similarity.scale(1.0 / tau);
    let eye = similarity.tape().constant(Array2::eye(n));
    let positives = logits.hadamard(eye)?.sum_rows();
    Ok(logits.row_logsumexp().sub(positives)?.reduce_mean())
}

/// `sigmoid(Z·Zᵀ)`.
pub fn inner_product_decode<'t>(z: Var<'t>) -> Result<Var<'t>> {
    Ok(z.matmul(z.transpose())?.sigmoid())
}
