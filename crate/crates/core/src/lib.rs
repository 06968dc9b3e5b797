//! Masked-autoencoder anomaly detection for two-sequence 3D MRI volumes.
//!
//! The crate is organised bottom-up: [`ndnum`] (tensors, reverse-mode
//! autodiff, AdamW), [`volio`] (volumes, MVOL files, min filter),
//! [`patchgrid`] (tokenization, positions, masking), [`mae3d`] (model and
//! training), [`anomaly`] (sliding-window inference and error maps),
//! [`dcebaseline`] (subtraction images), [`evalmetrics`] (AUROC and AP) and
//! [`phantom`] (synthetic data). [`ablation`] runs hyperparameter sweeps.

mod error;

pub mod ablation;
pub mod anomaly;
pub mod dcebaseline;
pub mod evalmetrics;
pub mod mae3d;
pub mod ndnum;
pub mod par;
pub mod patchgrid;
pub mod phantom;
pub mod rng;
pub mod volio;

pub use error::{Error, Result};
