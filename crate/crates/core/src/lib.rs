//! Augmentation-overlap toolkit for contrastive learning on hyperspheres.
//!
//! Simulates augmentation graphs over spherical-cap datasets, trains a small
//! InfoNCE encoder with hand-written gradients, checks the resulting
//! downstream bounds numerically and computes ACR/ARC overlap metrics.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod metrics;
pub mod sphere;
pub mod union_find;

pub use encoder::{
    train, Activation, ConstantEncoder, Encoder, EncoderParams, IdentityEncoder, PairMode, TrainConfig,
    TrainingTrace,
};
pub use error::{Error, Result};
pub use eval::{bounds_report, linear_probe, BoundsReport, FeatureTable, ProbeConfig, ProbeResult};
pub use graph::{build_graph, critical_radii, AugmentationGraph, CriticalRadii, Diameter};
pub use metrics::{arc, build_augmented_features, confusion_ratio_all, AugmentedFeatureSet, ConfusionReport};
pub use sphere::{make_dataset, CapSize, LabeledSphereDataset, SphericalCap, UnitVector};
pub use union_find::UnionFind;
