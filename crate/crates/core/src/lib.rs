//! Post-hoc prototype explanations for audio classifiers.
//!
//! A learned invertible channel transform `U = exp(A)` is applied to a
//! frozen backbone's feature maps so that each channel's prototypes become
//! pure; the classifier head absorbs `U⁻¹`, leaving predictions unchanged.

pub mod data_model;
pub mod disentangler;
pub mod error;
pub mod evaluator;
pub mod explainer;
pub mod linalg;
pub mod prototype_bank;
pub mod schemes;
pub mod synth;

pub use data_model::{
    gap, logits, ClassifierHead, FeatureMap, FeatureMapSet, InputGeometry, Manifest, SampleRecord, SpectrogramImage,
    Split, TaskKind, Tensor3,
};
pub use disentangler::{
    apply_transform, fit, fold_head, proto_count_at, DisentangleConfig, DisentangleState, FitOutcome, FoldedHead,
};
pub use error::{ApexError, Result};
pub use linalg::Matrix;
pub use schemes::{extract, purity, Coords, PrototypeVector, Scheme};
