//! A desk-scale laboratory for rotation-based backdoor poisoning attacks.
//!
//! The crate builds poisoned classification and detection datasets from
//! procedurally generated glyph scenes, trains tiny from-scratch victim
//! models, measures attack and clean metrics, runs augmentation and defense
//! countermeasures, and numerically validates a truncated-Gaussian mixture
//! model of the attack.
//!
//! All randomness flows through explicit seeds; identical inputs produce
//! bit-identical outputs, with or without the `parallel` feature.

pub mod dataset;
pub mod defense;
pub mod exec;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod poison;
pub mod theory;

pub use geometry::{Angle, BinaryMask, CropRect, Image, Placement};
