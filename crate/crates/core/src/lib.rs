//! Attributed-graph clustering with three cooperating channels.
//!
//! An autoencoder, a GCN and a centrality-encoded graph-attention network are
//! trained jointly on a shared set of cluster centroids. Node features are
//! first enriched by a contrastively pretrained two-layer GCN, and the
//! clustering objective is a pair of KL terms against a sharpened target
//! distribution.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: graph model, text I/O, adjacency normalisation, SBM generator.
//! - [`centrality`]: degree/betweenness/closeness encodings and spatial bias.
//! - [`autodiff`]: a small reverse-mode tape over dense matrices, plus Adam.
//! - [`layers`]: autoencoder, GCN, graph attention and contrastive encoder.
//! - [`training`]: pretraining, the joint loop and ablation variants.
//! - [`cluster`]: KMeans and the ACC/NMI/ARI/F1 metrics.
//! - [`config`], [`harness`], [`checkpoint`]: experiment plumbing.

pub mod autodiff;
pub mod centrality;
pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod error;
pub mod graph;
pub mod harness;
pub mod layers;
pub mod training;

pub use error::{Error, Result};

/// Dense row-major matrix used throughout the crate.
pub type Matrix = ndarray::Array2<f64>;
