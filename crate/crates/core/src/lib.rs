//! Disentangled mesh-convolutional variational autoencoder.
//!
//! The crate covers the whole numerical pipeline for fixed-topology
//! deformable shapes: mesh IO and graph operators, a procedural articulated
//! shape generator with known shape and pose factors, a reverse-mode tape,
//! the Chebyshev-convolution VAE with a split shape/pose latent, the
//! training loop, and the downstream tasks built on the latent split.

pub mod autograd;
pub mod cheb;
pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod hierarchy;
pub mod losses;
pub mod mesh;
pub mod model;
pub mod obj;
pub mod optim;
pub mod sparse;
pub mod synth;
pub mod tasks;
pub mod trainer;

pub use hierarchy::MeshHierarchy;
pub use mesh::TriangleMesh;
pub use model::{GaussianPosterior, LatentCode, MeshVae, ModelConfig};
pub use sparse::SparseMatrix;
