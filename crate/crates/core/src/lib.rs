//! Part-compositional latent generation at desk scale.
//!
//! Each asset is a list of parts, each part a fixed-size set of latent
//! tokens. A transformer alternating per-part and whole-asset attention is
//! trained with rectified flow matching to denoise all parts jointly under
//! one shared noise level. The crate also carries the mesh metrics (Chamfer
//! distance, F-score, pairwise voxel IoU) and the curation rules used to
//! build training sets.
//!
//! The crate is `no_std` and only needs `alloc`; file formats, GLTF parsing
//! and the command line live in the `partforge` crate.
#![no_std]
extern crate alloc;

pub mod autograd;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod latent;
pub mod nn;
pub mod tensor;

pub use autograd::{finite_diff_check, GradCheck, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use dataset::{CanonicalAsset, CurationRecord, ToyAsset, ToyKind, ToySpec, Verdict};
pub use denoiser::{ConditionTokens, Denoiser, DenoiserConfig, Level, Schedule};
pub use flow::{euler_sample, euler_sample_from, flow_loss, train, train_with, AdamState, SamplerConfig, StepRecord, TrainingExample, TrainingPlan, VelocityModel};
pub use geometry::{PointSample, TriMesh, VoxelGrid};
pub use latent::{AssetLatent, NoiseLevel, PartIdentityTable, PartTokenSet};
pub use nn::ParamStore;
pub use tensor::Tensor;
