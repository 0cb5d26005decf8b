//! Graph generation with trainable unpooling layers.
//!
//! The crate builds up from a featured-graph data model and a small
//! reverse-mode autodiff engine to the full generative stack: a stochastic
//! unpooling layer with an exact log-probability ledger, generator
//! composition (initial layer, edge-conditioned MPNN, skip connections),
//! WGAN-GP and VAE training with REINFORCE updates for the structure
//! parameters, a constructive pooling oracle that inverts the unpooling
//! layer, and the Waxman dataset plus KL/Wasserstein evaluation metrics.

pub mod graph;
pub mod nn;
pub mod unpool;
pub mod oracle;
pub mod genmodel;
pub mod metrics;
pub mod train;
pub mod cli;
