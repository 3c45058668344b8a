//! The diffusion pipeline: a backend contract, a built-in toy backend and the
//! generation driver that runs a backend under installed bends.

mod conditioning;
pub(crate) mod nn;
mod toy;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use conditioning::{apply_edit_with, perturbation_noise, ConditioningEdit, Embedding};
pub use nn::Conv2d;
pub use toy::{ToyBlock, ToyPipeline, ToyTextEncoder, ToyUnet, ToyVae, VaeBlock, EMBED_TOKENS, EMBED_WIDTH};

use crate::featureviz::{encode_png_rgb, tensor_to_rgb, VizError};
use crate::graph::{Component, ModelTree, SubmoduleInfo};
use crate::hooks::{ActiveRun, BendRegistry, CaptureRequest, FeatureMapCapture, GenerationHooks, HookError, NoHooks};
use crate::operators::OperatorError;
use crate::rng::{keyed_stream, standard_normals};
use crate::tensor::ActivationTensor;

pub const MAX_STEPS: usize = 1000;
pub const MAX_LATENT_ELEMENTS: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdapterError {
    #[error("{}", .0.as_str())]
    MissingCapability(Capability),
    #[error("invalid module structure: {0}")]
    InvalidStructure(String),
    #[error("backend does not support: {0}")]
    Unsupported(String),
    #[error("backend failure: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("invalid conditioning edit: {0}")]
    InvalidEdit(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite output at step {step} in {location}")]
    NonFiniteOutput { step: usize, location: String },
    #[error("a generation is already running in this session")]
    ConcurrentGeneration,
    #[error(transparent)]
    Hook(HookError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Viz(#[from] VizError),
}

impl From<HookError> for PipelineError {
    fn from(e: HookError) -> Self {
        match e {
            HookError::NonFinite { component, path, step } => PipelineError::NonFiniteOutput {
                step,
                location: format!("{component}:{path}"),
            },
            HookError::Operator {
                component,
                path,
                step,
                source,
                ..
            } if matches!(source.root(), OperatorError::NonFiniteOutput { .. }) => PipelineError::NonFiniteOutput {
                step,
                location: format!("{component}:{path}"),
            },
            other => PipelineError::Hook(other),
        }
    }
}

/// The five calls a backend must support to be bendable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    EnumerateSubmodules,
    /// Every hookable layer output is routed through `GenerationHooks::layer_output`.
    OutputTransform,
    Forward,
    /// The sampler calls `GenerationHooks::notify_step` before each step.
    StepCallback,
    Decode,
}

impl Capability {
    pub const ALL: [Capability; 5] = [
        Capability::EnumerateSubmodules,
        Capability::OutputTransform,
        Capability::Forward,
        Capability::StepCallback,
        Capability::Decode,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Capability::EnumerateSubmodules => "enumerate_submodules",
            Capability::OutputTransform => "output_transform",
            Capability::Forward => "forward",
            Capability::StepCallback => "step_callback",
            Capability::Decode => "decode",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    pub prompt: String,
    pub negative_prompt: Option<String>,
    pub seed: u64,
    pub steps: usize,
    pub cfg: f64,
    pub sampler_id: String,
    pub scheduler_id: String,
    pub latent_shape: [usize; 4],
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            negative_prompt: None,
            seed: 42,
            steps: 20,
            cfg: 7.0,
            sampler_id: "dpmpp_2m".into(),
            scheduler_id: "karras".into(),
            latent_shape: [1, 4, 16, 16],
        }
    }
}

impl GenerationParams {
    pub fn new(prompt: impl Into<String>, seed: u64, steps: usize) -> Self {
        Self {
            prompt: prompt.into(),
            seed,
            steps,
            ..Self::default()
        }
    }

    pub fn with_cfg(mut self, cfg: f64) -> Self {
        self.cfg = cfg;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidParams(m));
        if self.steps == 0 || self.steps > MAX_STEPS {
            return bad(format!("steps must be in 1..={MAX_STEPS}, got {}", self.steps));
        }
        if !(self.cfg.is_finite() && self.cfg >= 0.0) {
            return bad(format!("cfg must be finite and >= 0, got {}", self.cfg));
        }
        if self.latent_shape.contains(&0) {
            return bad(format!("latent dims must be >= 1, got {:?}", self.latent_shape));
        }
        let elements = self
            .latent_shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_LATENT_ELEMENTS);
        if elements.is_none() {
            return bad(format!("latent {:?} exceeds {MAX_LATENT_ELEMENTS} elements", self.latent_shape));
        }
        Ok(())
    }
}

/// x₀ for a generation: a Gaussian latent keyed by `params.seed`.
pub fn initial_latent(params: &GenerationParams) -> ActivationTensor {
    let n: usize = params.latent_shape.iter().product();
    let mut rng = keyed_stream("initial-latent", &[&params.seed.to_le_bytes()]);
    ActivationTensor::from_vec(params.latent_shape, standard_normals(&mut rng, n)).expect("validated latent shape")
}

pub struct SampleOutput {
    pub latent: ActivationTensor,
    pub forwards_per_step: usize,
}

/// What a diffusion backend provides. Implementations route every hookable
/// layer output through `hooks.layer_output` and announce each sampler step
/// through `hooks.notify_step`.
pub trait BackendAdapter: Send + Sync {
    fn capabilities(&self) -> Vec<Capability>;

    /// Named submodules in declaration order.
    fn enumerate_submodules(&self, component: Component) -> Result<Vec<SubmoduleInfo>, AdapterError>;

    /// (tokens, width) of the conditioning matrix.
    fn embedding_shape(&self) -> (usize, usize);

    fn encode_text(&self, prompt: &str, hooks: &mut dyn GenerationHooks) -> Result<Embedding, PipelineError>;

    fn sample(
        &self,
        params: &GenerationParams,
        cond: &Embedding,
        uncond: &Embedding,
        hooks: &mut dyn GenerationHooks,
    ) -> Result<SampleOutput, PipelineError>;

    fn decode(&self, latent: &ActivationTensor, hooks: &mut dyn GenerationHooks) -> Result<ActivationTensor, PipelineError>;
}

/// A checked backend with its module trees.
#[derive(Clone)]
pub struct PipelineHandle {
    adapter: Arc<dyn BackendAdapter>,
    trees: Arc<BTreeMap<Component, ModelTree>>,
}

impl fmt::Debug for PipelineHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PipelineHandle")
            .field("components", &self.trees.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Check a backend against the contract and build its module trees.
pub fn wrap_backend(adapter: Arc<dyn BackendAdapter>) -> Result<PipelineHandle, AdapterError> {
    let caps = adapter.capabilities();
    if let Some(missing) = Capability::ALL.into_iter().find(|c| !caps.contains(c)) {
        return Err(AdapterError::MissingCapability(missing));
    }
    let (tokens, width) = adapter.embedding_shape();
    if tokens == 0 || width == 0 {
        return Err(AdapterError::InvalidStructure(format!("embedding shape ({tokens}, {width})")));
    }
    let mut trees = BTreeMap::new();
    for component in Component::ALL {
        let infos = adapter.enumerate_submodules(component)?;
        trees.insert(component, ModelTree::from_submodules(component, &infos)?);
    }
    Ok(PipelineHandle {
        adapter,
        trees: Arc::new(trees),
    })
}

/// The built-in toy pipeline, weights keyed by `init_seed`.
pub fn build_toy_pipeline(init_seed: u64) -> PipelineHandle {
    wrap_backend(Arc::new(ToyPipeline::new(init_seed))).expect("toy pipeline satisfies the adapter contract")
}

pub fn encode_prompt(pipeline: &PipelineHandle, prompt: &str) -> Result<Embedding, PipelineError> {
    pipeline.encode_prompt(prompt)
}

pub fn apply_conditioning_edit(
    emb: &Embedding,
    edit: &ConditioningEdit,
    pipeline: &PipelineHandle,
) -> Result<Embedding, PipelineError> {
    apply_edit_with(emb, edit, |p| pipeline.encode_prompt(p))
}

impl PipelineHandle {
    pub fn adapter(&self) -> &dyn BackendAdapter {
        self.adapter.as_ref()
    }

    pub fn tree(&self, component: Component) -> Result<&ModelTree, HookError> {
        self.trees.get(&component).ok_or(HookError::MissingComponent(component))
    }

    pub fn encode_prompt(&self, prompt: &str) -> Result<Embedding, PipelineError> {
        self.adapter.encode_text(prompt, &mut NoHooks)
    }
}

/// JSON run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: usize,
    /// Total operator invocations per installed bend id.
    pub bend_invocations: BTreeMap<String, u64>,
    pub bend_invocations_per_step: BTreeMap<String, Vec<u64>>,
    pub forwards_per_step: usize,
    pub duration_ms: u64,
    pub image_sha256: String,
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub image: RgbImage,
    pub png: Vec<u8>,
    pub latent: ActivationTensor,
    pub report: RunReport,
    pub captures: Vec<FeatureMapCapture>,
}

/// One generation: encode, edit the conditioning, sample, decode, with the
/// registry's bends active throughout.
pub fn run_generation(
    pipeline: &PipelineHandle,
    registry: &BendRegistry,
    edits: &[ConditioningEdit],
    params: &GenerationParams,
    captures: Vec<CaptureRequest>,
) -> Result<GenerationOutput, PipelineError> {
    params.validate()?;
    for edit in edits {
        edit.validate()?;
    }
    for request in &captures {
        request.validate(pipeline.tree(request.component)?)?;
    }
    let started = Instant::now();
    let mut run = ActiveRun::new(registry, params.seed, params.steps).with_captures(captures);

    let adapter = pipeline.adapter();
    let mut cond = adapter.encode_text(&params.prompt, &mut run)?;
    for edit in edits {
        cond = apply_conditioning_edit(&cond, edit, pipeline)?;
    }
    let uncond = adapter.encode_text(params.negative_prompt.as_deref().unwrap_or(""), &mut run)?;
    let sample = adapter.sample(params, &cond, &uncond, &mut run)?;
    let expected: Vec<usize> = (0..params.steps).collect();
    if run.notified_steps() != expected.as_slice() {
        return Err(AdapterError::Backend(format!(
            "sampler announced steps {:?}, expected 0..{}",
            run.notified_steps(),
            params.steps
        ))
        .into());
    }
    let decoded = adapter.decode(&sample.latent, &mut run)?;
    if !decoded.is_finite() {
        return Err(PipelineError::NonFiniteOutput {
            step: params.steps - 1,
            location: "decoded image".into(),
        });
    }
    let image = tensor_to_rgb(&decoded)?;
    let png = encode_png_rgb(&image)?;

    let report = RunReport {
        steps: params.steps,
        bend_invocations: run.invocation_totals(),
        bend_invocations_per_step: run.invocations_per_step().clone(),
        forwards_per_step: sample.forwards_per_step,
        duration_ms: started.elapsed().as_millis() as u64,
        image_sha256: hex::encode(Sha256::digest(image.as_raw())),
    };
    Ok(GenerationOutput {
        image,
        png,
        latent: sample.latent,
        report,
        captures: run.into_captures(),
    })
}
