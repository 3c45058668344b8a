//! A session: one pipeline, its installed bends and conditioning edits, and
//! at most one generation at a time.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use image::GrayImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featureviz::{captures_to_grid, encode_png_gray, CaptureSidecar, NormalizeMode, ReductionSpec, VizError};
use crate::graph::{Component, LayerPath, ModelTree};
use crate::hooks::{BendRegistry, BendSpec, CaptureRequest, HookError, HookHandle, InstalledBend};
use crate::pipeline::{run_generation, ConditioningEdit, GenerationOutput, GenerationParams, PipelineError, PipelineHandle};
use crate::recipe::{Recipe, RecipeError, RECIPE_VERSION};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error(transparent)]
    Hook(#[from] HookError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error(transparent)]
    Viz(#[from] VizError),
    #[error("no bend with id `{0}`")]
    UnknownBend(String),
    #[error("no conditioning edit with id `{0}`")]
    UnknownEdit(String),
    #[error("cannot tell which component `{0}` belongs to")]
    UnknownComponent(String),
    #[error("no captures matched the request")]
    EmptyCapture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditEntry {
    pub id: String,
    pub edit: ConditioningEdit,
}

/// A capture request rendered as one greyscale grid, tiles ordered by step
/// then forward pass.
#[derive(Debug, Clone)]
pub struct CaptureGrid {
    pub image: GrayImage,
    pub png: Vec<u8>,
    pub tiles: Vec<CaptureSidecar>,
    pub output: GenerationOutput,
}

static SESSION_COUNTER: AtomicU64 = AtomicU64::new(1);

pub struct Session {
    id: String,
    pipeline: PipelineHandle,
    registry: BendRegistry,
    edits: Vec<EditEntry>,
    next_edit: u64,
    generation: Mutex<GenerationParams>,
    busy: AtomicBool,
}

struct BusyGuard<'a>(&'a AtomicBool);

impl<'a> BusyGuard<'a> {
    fn acquire(flag: &'a AtomicBool) -> Result<Self, PipelineError> {
        flag.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map_err(|_| PipelineError::ConcurrentGeneration)?;
        Ok(Self(flag))
    }
}

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

impl Session {
    pub fn new(pipeline: PipelineHandle) -> Self {
        let n = SESSION_COUNTER.fetch_add(1, Ordering::Relaxed);
        Self {
            id: format!("session-{n}"),
            pipeline,
            registry: BendRegistry::new(),
            edits: Vec::new(),
            next_edit: 1,
            generation: Mutex::new(GenerationParams::default()),
            busy: AtomicBool::new(false),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pipeline(&self) -> &PipelineHandle {
        &self.pipeline
    }

    pub fn tree(&self, component: Component) -> Result<&ModelTree, HookError> {
        self.pipeline.tree(component)
    }

    /// The component whose tree is rooted at the path's first segment.
    pub fn component_of(&self, path: &LayerPath) -> Option<Component> {
        let root = path.segments()[0].to_string();
        Component::ALL
            .into_iter()
            .find(|c| self.pipeline.tree(*c).is_ok_and(|t| t.root().name() == root))
    }

    pub fn is_busy(&self) -> bool {
        self.busy.load(Ordering::Acquire)
    }

    pub fn install(&mut self, spec: BendSpec) -> Result<HookHandle, SessionError> {
        let tree = self.pipeline.tree(spec.component)?;
        Ok(self.registry.install(tree, spec)?)
    }

    pub fn remove(&mut self, handle: &HookHandle) -> Result<bool, SessionError> {
        Ok(self.registry.remove(handle)?)
    }

    pub fn remove_by_id(&mut self, id: &str) -> Result<HookHandle, SessionError> {
        let handle = self
            .registry
            .handle_for(id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownBend(id.to_owned()))?;
        self.registry.remove(&handle)?;
        Ok(handle)
    }

    pub fn bends(&self) -> &[InstalledBend] {
        self.registry.installed()
    }

    pub fn registry(&self) -> &BendRegistry {
        &self.registry
    }

    pub fn add_conditioning_edit(&mut self, edit: ConditioningEdit) -> Result<String, SessionError> {
        edit.validate()?;
        let id = format!("e{}", self.next_edit);
        self.next_edit += 1;
        self.edits.push(EditEntry { id: id.clone(), edit });
        Ok(id)
    }

    pub fn remove_conditioning_edit(&mut self, id: &str) -> Result<(), SessionError> {
        let before = self.edits.len();
        self.edits.retain(|e| e.id != id);
        if self.edits.len() == before {
            return Err(SessionError::UnknownEdit(id.to_owned()));
        }
        Ok(())
    }

    pub fn conditioning_edits(&self) -> &[EditEntry] {
        &self.edits
    }

    fn edit_list(&self) -> Vec<ConditioningEdit> {
        self.edits.iter().map(|e| e.edit.clone()).collect()
    }

    /// Parameters of the most recent generation (defaults before the first).
    pub fn generation_params(&self) -> GenerationParams {
        self.generation.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn set_generation_params(&self, params: GenerationParams) {
        *self.generation.lock().unwrap_or_else(|p| p.into_inner()) = params;
    }

    fn run(&self, params: &GenerationParams, captures: Vec<CaptureRequest>) -> Result<GenerationOutput, SessionError> {
        let _guard = BusyGuard::acquire(&self.busy)?;
        self.set_generation_params(params.clone());
        Ok(run_generation(&self.pipeline, &self.registry, &self.edit_list(), params, captures)?)
    }

    pub fn generate(&self, params: &GenerationParams) -> Result<GenerationOutput, SessionError> {
        self.run(params, Vec::new())
    }

    pub fn generate_with_captures(
        &self,
        params: &GenerationParams,
        captures: Vec<CaptureRequest>,
    ) -> Result<GenerationOutput, SessionError> {
        self.run(params, captures)
    }

    pub fn capture_grid(
        &self,
        params: &GenerationParams,
        request: CaptureRequest,
        reduction: ReductionSpec,
        mode: NormalizeMode,
        columns: Option<usize>,
    ) -> Result<CaptureGrid, SessionError> {
        let output = self.run(params, vec![request])?;
        let mut captures = output.captures.clone();
        if captures.is_empty() {
            return Err(SessionError::EmptyCapture);
        }
        captures.sort_by_key(|c| (c.step_index, c.forward_index));
        let image = captures_to_grid(&captures, &reduction, mode, columns)?;
        let png = encode_png_gray(&image)?;
        let tiles = captures.iter().map(|c| CaptureSidecar::for_capture(c, reduction)).collect();
        Ok(CaptureGrid {
            image,
            png,
            tiles,
            output,
        })
    }

    pub fn export_recipe(&self) -> Recipe {
        Recipe {
            version: RECIPE_VERSION,
            bends: self.registry.installed().iter().map(|b| b.spec.clone()).collect(),
            conditioning_edits: self.edit_list(),
            generation: self.generation_params(),
        }
    }

    /// Replace bends, edits and generation parameters with the recipe's.
    /// Nothing changes if any bend fails to install.
    pub fn import_recipe(&mut self, recipe: &Recipe) -> Result<Vec<HookHandle>, SessionError> {
        recipe.validate()?;
        let mut registry = BendRegistry::new();
        let mut handles = Vec::new();
        for spec in &recipe.bends {
            let tree = self.pipeline.tree(spec.component)?;
            handles.push(registry.install(tree, spec.clone())?);
        }
        self.registry = registry;
        self.edits.clear();
        for edit in &recipe.conditioning_edits {
            self.add_conditioning_edit(edit.clone())?;
        }
        self.set_generation_params(recipe.generation.clone());
        Ok(handles)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::BendingOperator;
    use crate::pipeline::build_toy_pipeline;

    fn path(s: &str) -> LayerPath {
        LayerPath::parse(s).unwrap()
    }

    #[test]
    fn busy_flag_blocks_second_generation() {
        let s = Session::new(build_toy_pipeline(1));
        let guard = BusyGuard::acquire(&s.busy).unwrap();
        let err = s.generate(&GenerationParams::new("x", 1, 1)).unwrap_err();
        assert_eq!(err, SessionError::Pipeline(PipelineError::ConcurrentGeneration));
        drop(guard);
        assert!(!s.is_busy());
        s.generate(&GenerationParams::new("x", 1, 1)).unwrap();
    }

    #[test]
    fn component_inference() {
        let s = Session::new(build_toy_pipeline(1));
        assert_eq!(s.component_of(&path("diffusion_model.input_blocks")), Some(Component::Unet));
        assert_eq!(s.component_of(&path("vae.decoder.0.conv")), Some(Component::Vae));
        assert_eq!(s.component_of(&path("nothing")), None);
    }

    #[test]
    fn import_is_atomic() {
        let mut s = Session::new(build_toy_pipeline(1));
        s.install(BendSpec::new(
            "keep",
            Component::Unet,
            path("diffusion_model.input_blocks.0.act"),
            BendingOperator::mul_scalar(2.0),
        ))
        .unwrap();
        let mut r = Recipe::new(GenerationParams::default());
        r.bends.push(BendSpec::new("ok", Component::Unet, path("diffusion_model.input_blocks.1.act"), BendingOperator::mul_scalar(2.0)));
        r.bends.push(BendSpec::new("bad", Component::Unet, path("diffusion_model.nope"), BendingOperator::mul_scalar(2.0)));
        assert!(s.import_recipe(&r).is_err());
        assert_eq!(s.bends().len(), 1);
        assert_eq!(s.bends()[0].spec.id, "keep");
        r.bends.pop();
        s.import_recipe(&r).unwrap();
        assert_eq!(s.export_recipe(), r);
    }

    #[test]
    fn edits_have_ids() {
        let mut s = Session::new(build_toy_pipeline(1));
        let a = s.add_conditioning_edit(ConditioningEdit::Scale { factor: 2.0 }).unwrap();
        let b = s.add_conditioning_edit(ConditioningEdit::Scale { factor: 0.5 }).unwrap();
        assert_ne!(a, b);
        s.remove_conditioning_edit(&a).unwrap();
        assert!(matches!(s.remove_conditioning_edit(&a), Err(SessionError::UnknownEdit(_))));
        assert!(s.add_conditioning_edit(ConditioningEdit::Perturb { sigma: -1.0, edit_seed: 0 }).is_err());
    }
}
