//! Post-hoc complexity measures that rank trained convolutional networks by
//! their generalization gap, plus the machinery to evaluate them: a small
//! tensor engine, reproducible file formats, vicinal perturbations, a
//! synthetic model zoo and rank/conditional-mutual-information scoring.

pub mod data;
pub mod io;
pub mod measures;
pub mod model;
pub mod nn;
pub mod run;
pub mod scoring;
pub mod tensor;
pub mod vicinal;
pub mod zoo;

pub use data::{Dataset, LabeledBatch, Split};
pub use model::{Conv2d, Dense, Layer, LayerKind, ModelSpec, Padding};
pub use nn::{forward, forward_from, grad_wrt_activation, grad_wrt_weights, spectral_norm, ActivationTrace, Mode};
pub use tensor::Tensor;
