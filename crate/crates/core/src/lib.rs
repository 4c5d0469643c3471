//! Inverse prediction of capacitor electrostatic fields from the plate
//! separation `d`.
//!
//! The pipeline: solve Laplace's equation for a parametric capacitor
//! ([`field`]), train an autoencoder or VAE on the resulting fields
//! ([`nn`], [`generative`]), fit an affine regression from a field or its
//! latent code to `d` and invert it ([`inverse`]), then benchmark the
//! reconstructions under noise ([`harness`]).

pub mod field;
pub mod generative;
pub mod harness;
pub mod inverse;
pub mod nn;

pub use field::{CapacitorConfig, Dataset, FieldGrid, FieldUnit, SorOptions};
pub use generative::{GenerativeModel, LatentVector, ModelKind, TrainConfig};
pub use harness::{Method, SweepConfig, SweepResult};
pub use inverse::{Inverter, RegressionModel, Space};
pub use nn::{Mlp, OptimizerKind};
