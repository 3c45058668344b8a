//! Model bending for latent-diffusion pipelines.
//!
//! Layers of a pipeline are addressed by dotted paths, bending operators are
//! installed on their outputs for chosen sampler steps, intermediate feature
//! maps can be captured as images, and a whole configuration is saved as a
//! canonical JSON recipe. A small deterministic pipeline is built in; other
//! backends plug in through [`pipeline::BackendAdapter`].

pub mod dsl;
pub mod featureviz;
pub mod graph;
pub mod hooks;
pub mod operators;
pub mod pipeline;
pub mod recipe;
pub mod rng;
pub mod service;
pub mod session;
pub mod tensor;

pub use graph::{Component, LayerPath, ModelTree, ModuleKind, ModuleNode, PathPattern};
pub use hooks::{BendRegistry, BendSpec, CapturePhase, CaptureRequest, HookHandle, StepSchedule};
pub use operators::{BendingOperator, OperatorKind};
pub use pipeline::{build_toy_pipeline, ConditioningEdit, Embedding, GenerationParams, PipelineHandle, RunReport};
pub use recipe::{parse_recipe, serialize_recipe, Recipe};
pub use session::Session;
pub use tensor::ActivationTensor;
