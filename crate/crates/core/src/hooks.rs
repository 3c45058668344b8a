//! Installing bends on a model and running them during generation.
//!
//! A [`BendRegistry`] is the per-session list of installed bends. Each
//! generation borrows it through an [`ActiveRun`], which tracks the sampler
//! step, gates bends by their schedules, counts invocations and records
//! feature-map captures. Model weights are never touched.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Component, GraphError, LayerPath, ModelTree, PathPattern};
use crate::operators::{BendingOperator, InvocationContext, OperatorError};
use crate::tensor::ActivationTensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HookError {
    #[error(transparent)]
    PathNotFound(#[from] GraphError),
    #[error("`{path}` is not bendable (kind {kind})")]
    NotBendable { path: String, kind: String },
    #[error("pattern `{pattern}` matches no bendable layer")]
    NoMatch { pattern: String },
    #[error("a bend with id `{0}` is already installed")]
    DuplicateId(String),
    #[error("unknown hook handle for `{spec_id}` (#{installed_at})")]
    UnknownHandle { spec_id: String, installed_at: u64 },
    #[error("step {got} arrived after step {previous}")]
    OutOfOrderStep { previous: usize, got: usize },
    #[error("step {step} is outside a {total}-step generation")]
    StepOutOfRange { step: usize, total: usize },
    #[error("bend `{spec_id}` failed at {component}:{path} step {step}: {source}")]
    Operator {
        spec_id: String,
        component: Component,
        path: String,
        step: usize,
        #[source]
        source: Box<OperatorError>,
    },
    #[error("non-finite activation at {component}:{path} step {step}")]
    NonFinite {
        component: Component,
        path: String,
        step: usize,
    },
    #[error("no {0} model is loaded")]
    MissingComponent(Component),
}

/// Inclusive sampler-step ranges. No ranges means every step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule")]
pub struct StepSchedule {
    ranges: Vec<(usize, usize)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    ranges: Vec<(usize, usize)>,
}

impl TryFrom<RawSchedule> for StepSchedule {
    type Error = String;

    fn try_from(raw: RawSchedule) -> Result<Self, Self::Error> {
        StepSchedule::new(raw.ranges)
    }
}

impl StepSchedule {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn new(ranges: Vec<(usize, usize)>) -> Result<Self, String> {
        if let Some((lo, hi)) = ranges.iter().find(|(lo, hi)| lo > hi) {
            return Err(format!("step range [{lo}, {hi}] has lo > hi"));
        }
        Ok(Self { ranges })
    }

    pub fn range(lo: usize, hi: usize) -> Result<Self, String> {
        Self::new(vec![(lo, hi)])
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn is_all(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn contains(&self, step: usize) -> bool {
        self.ranges.is_empty() || self.ranges.iter().any(|&(lo, hi)| lo <= step && step <= hi)
    }
}

impl fmt::Display for StepSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ranges.is_empty() {
            return f.write_str("all");
        }
        for (i, (lo, hi)) in self.ranges.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{lo}-{hi}")?;
        }
        Ok(())
    }
}

/// The installable unit: an operator, where it goes and when it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBendSpec")]
pub struct BendSpec {
    pub id: String,
    pub component: Component,
    /// Exact paths or globs; globs expand at install time.
    pub targets: Vec<PathPattern>,
    pub operator: BendingOperator,
    pub schedule: StepSchedule,
    pub enabled: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBendSpec {
    id: String,
    component: Component,
    targets: Vec<PathPattern>,
    operator: BendingOperator,
    schedule: StepSchedule,
    enabled: bool,
}

impl TryFrom<RawBendSpec> for BendSpec {
    type Error = String;

    fn try_from(raw: RawBendSpec) -> Result<Self, Self::Error> {
        let spec = BendSpec {
            id: raw.id,
            component: raw.component,
            targets: raw.targets,
            operator: raw.operator,
            schedule: raw.schedule,
            enabled: raw.enabled,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl BendSpec {
    pub fn new(
        id: impl Into<String>,
        component: Component,
        target: LayerPath,
        operator: BendingOperator,
    ) -> Self {
        Self {
            id: id.into(),
            component,
            targets: vec![target.into()],
            operator,
            schedule: StepSchedule::all(),
            enabled: true,
        }
    }

    pub fn with_schedule(mut self, schedule: StepSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_targets(mut self, targets: Vec<PathPattern>) -> Self {
        self.targets = targets;
        self
    }

    pub fn disabled(mut self) -> Self {
        self.enabled = false;
        self
    }

    /// Checks that hold without a model: id, targets and operator.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() || self.id.chars().any(|c| c.is_whitespace() || c == '/') {
            return Err(format!("invalid bend id `{}`", self.id));
        }
        if self.targets.is_empty() {
            return Err(format!("bend `{}` has no targets", self.id));
        }
        self.operator.validate().map_err(|e| e.to_string())
    }

    /// Expand targets against `tree` into concrete bendable layer paths.
    pub fn resolve_targets(&self, tree: &ModelTree) -> Result<Vec<LayerPath>, HookError> {
        let mut out: Vec<LayerPath> = Vec::new();
        for target in &self.targets {
            let found = match target.as_path() {
                Some(path) => {
                    let node = tree.resolve(&path)?;
                    if !node.bendable() {
                        return Err(HookError::NotBendable {
                            path: path.to_string(),
                            kind: node.kind().as_str().into(),
                        });
                    }
                    vec![path]
                }
                None => {
                    let matched: Vec<LayerPath> = tree
                        .walk()
                        .into_iter()
                        .filter(|(p, n)| n.bendable() && target.matches(p))
                        .map(|(p, _)| p)
                        .collect();
                    if matched.is_empty() {
                        return Err(HookError::NoMatch {
                            pattern: target.to_string(),
                        });
                    }
                    matched
                }
            };
            for p in found {
                if !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HookHandle {
    pub spec_id: String,
    pub installed_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstalledBend {
    pub handle: HookHandle,
    pub spec: BendSpec,
    pub resolved: Vec<LayerPath>,
}

#[derive(Debug, Clone, Default)]
pub struct BendRegistry {
    installed: Vec<InstalledBend>,
    next_seq: u64,
}

impl BendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn install(&mut self, tree: &ModelTree, spec: BendSpec) -> Result<HookHandle, HookError> {
        if self.installed.iter().any(|b| b.spec.id == spec.id) {
            return Err(HookError::DuplicateId(spec.id));
        }
        debug_assert_eq!(tree.component(), spec.component);
        let resolved = spec.resolve_targets(tree)?;
        let handle = HookHandle {
            spec_id: spec.id.clone(),
            installed_at: self.next_seq,
        };
        self.next_seq += 1;
        self.installed.push(InstalledBend {
            handle: handle.clone(),
            spec,
            resolved,
        });
        Ok(handle)
    }

    /// Remove by handle. Returns whether a bend was actually removed;
    /// removing an already removed handle is a no-op.
    pub fn remove(&mut self, handle: &HookHandle) -> Result<bool, HookError> {
        if handle.installed_at >= self.next_seq {
            return Err(HookError::UnknownHandle {
                spec_id: handle.spec_id.clone(),
                installed_at: handle.installed_at,
            });
        }
        let before = self.installed.len();
        self.installed.retain(|b| &b.handle != handle);
        Ok(self.installed.len() != before)
    }

    pub fn handle_for(&self, spec_id: &str) -> Option<&HookHandle> {
        self.installed
            .iter()
            .find(|b| b.spec.id == spec_id)
            .map(|b| &b.handle)
    }

    pub fn clear(&mut self) {
        self.installed.clear();
    }

    pub fn installed(&self) -> &[InstalledBend] {
        &self.installed
    }

    pub fn is_empty(&self) -> bool {
        self.installed.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapturePhase {
    PreBend,
    PostBend,
}

impl CapturePhase {
    pub fn as_str(self) -> &'static str {
        match self {
            CapturePhase::PreBend => "pre_bend",
            CapturePhase::PostBend => "post_bend",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureRequest {
    pub component: Component,
    pub path: LayerPath,
    pub steps: StepSchedule,
    pub phase: CapturePhase,
}

impl CaptureRequest {
    pub fn new(component: Component, path: LayerPath, phase: CapturePhase) -> Self {
        Self {
            component,
            path,
            steps: StepSchedule::all(),
            phase,
        }
    }

    pub fn with_steps(mut self, steps: StepSchedule) -> Self {
        self.steps = steps;
        self
    }

    /// Captures are taken where layer outputs are hooked, i.e. at bendable leaves.
    pub fn validate(&self, tree: &ModelTree) -> Result<(), HookError> {
        let node = tree.resolve(&self.path)?;
        if !node.bendable() {
            return Err(HookError::NotBendable {
                path: self.path.to_string(),
                kind: node.kind().as_str().into(),
            });
        }
        Ok(())
    }
}

/// Snapshot of one layer output at one step of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapCapture {
    pub component: Component,
    pub path: LayerPath,
    pub step_index: usize,
    /// Position of this capture among the layer's outputs within its step
    /// (0 for the unconditional pass, 1 for the conditional pass under CFG).
    pub forward_index: usize,
    pub phase: CapturePhase,
    pub tensor: ActivationTensor,
}

/// Callbacks a model invokes while it runs.
pub trait GenerationHooks {
    /// Called by the sampler before each denoising step.
    fn notify_step(&mut self, step_index: usize) -> Result<(), HookError>;

    /// Called with the output of every hookable layer; returns the output to
    /// pass downstream.
    fn layer_output(
        &mut self,
        component: Component,
        path: &LayerPath,
        output: ActivationTensor,
    ) -> Result<ActivationTensor, HookError>;
}

/// Hooks that leave every layer untouched.
#[derive(Debug, Default)]
pub struct NoHooks;

impl GenerationHooks for NoHooks {
    fn notify_step(&mut self, _step_index: usize) -> Result<(), HookError> {
        Ok(())
    }

    fn layer_output(
        &mut self,
        _component: Component,
        _path: &LayerPath,
        output: ActivationTensor,
    ) -> Result<ActivationTensor, HookError> {
        Ok(output)
    }
}

/// Per-generation state over a borrowed registry.
pub struct ActiveRun<'r> {
    registry: &'r BendRegistry,
    base_seed: u64,
    total_steps: usize,
    step: usize,
    last_notified: Option<usize>,
    notified_steps: Vec<usize>,
    sites: HashMap<(Component, LayerPath), Vec<usize>>,
    capture_requests: Vec<CaptureRequest>,
    captures: Vec<FeatureMapCapture>,
    /// (component, path, step) -> outputs seen so far in that step
    forward_counter: HashMap<(Component, LayerPath, usize), usize>,
    invocations: BTreeMap<String, Vec<u64>>,
}

impl<'r> ActiveRun<'r> {
    pub fn new(registry: &'r BendRegistry, base_seed: u64, total_steps: usize) -> Self {
        let mut sites: HashMap<(Component, LayerPath), Vec<usize>> = HashMap::new();
        let mut invocations = BTreeMap::new();
        for (i, bend) in registry.installed().iter().enumerate() {
            for path in &bend.resolved {
                sites
                    .entry((bend.spec.component, path.clone()))
                    .or_default()
                    .push(i);
            }
            invocations.insert(bend.spec.id.clone(), vec![0; total_steps.max(1)]);
        }
        Self {
            registry,
            base_seed,
            total_steps,
            step: 0,
            last_notified: None,
            notified_steps: Vec::new(),
            sites,
            capture_requests: Vec::new(),
            captures: Vec::new(),
            forward_counter: HashMap::new(),
            invocations,
        }
    }

    pub fn with_captures(mut self, requests: Vec<CaptureRequest>) -> Self {
        self.capture_requests = requests;
        self
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn notified_steps(&self) -> &[usize] {
        &self.notified_steps
    }

    /// Total operator invocations per bend id.
    pub fn invocation_totals(&self) -> BTreeMap<String, u64> {
        self.invocations
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().sum()))
            .collect()
    }

    /// Operator invocations per bend id, indexed by step.
    pub fn invocations_per_step(&self) -> &BTreeMap<String, Vec<u64>> {
        &self.invocations
    }

    pub fn into_captures(self) -> Vec<FeatureMapCapture> {
        self.captures
    }

    fn capture(&mut self, component: Component, path: &LayerPath, phase: CapturePhase, forward_index: usize, x: &ActivationTensor) {
        let step = self.step;
        let wanted = self.capture_requests.iter().any(|r| {
            r.phase == phase && r.component == component && &r.path == path && r.steps.contains(step)
        });
        if wanted {
            self.captures.push(FeatureMapCapture {
                component,
                path: path.clone(),
                step_index: step,
                forward_index,
                phase,
                tensor: x.clone(),
            });
        }
    }
}

impl GenerationHooks for ActiveRun<'_> {
    fn notify_step(&mut self, step_index: usize) -> Result<(), HookError> {
        if let Some(previous) = self.last_notified {
            if step_index < previous {
                return Err(HookError::OutOfOrderStep {
                    previous,
                    got: step_index,
                });
            }
        }
        if step_index >= self.total_steps {
            return Err(HookError::StepOutOfRange {
                step: step_index,
                total: self.total_steps,
            });
        }
        self.last_notified = Some(step_index);
        self.notified_steps.push(step_index);
        self.step = step_index;
        Ok(())
    }

    fn layer_output(
        &mut self,
        component: Component,
        path: &LayerPath,
        output: ActivationTensor,
    ) -> Result<ActivationTensor, HookError> {
        let step = self.step;
        let non_finite = || HookError::NonFinite {
            component,
            path: path.to_string(),
            step,
        };
        if !output.is_finite() {
            return Err(non_finite());
        }
        let key = (component, path.clone(), step);
        let forward_index = *self.forward_counter.get(&key).unwrap_or(&0);
        self.forward_counter.insert(key, forward_index + 1);

        self.capture(component, path, CapturePhase::PreBend, forward_index, &output);
        let mut x = output;
        let registry = self.registry;
        if let Some(indices) = self.sites.get(&(component, path.clone())) {
            for &i in indices {
                let bend = &registry.installed()[i];
                if !bend.spec.enabled || !bend.spec.schedule.contains(step) {
                    continue;
                }
                let ctx = InvocationContext::new(step, self.base_seed, path.clone());
                x = bend
                    .spec
                    .operator
                    .apply(&x, &ctx)
                    .map_err(|source| HookError::Operator {
                        spec_id: bend.spec.id.clone(),
                        component,
                        path: path.to_string(),
                        step,
                        source: Box::new(source),
                    })?;
                if let Some(counts) = self.invocations.get_mut(&bend.spec.id) {
                    let last = counts.len() - 1;
                    counts[step.min(last)] += 1;
                }
            }
        }
        if !x.is_finite() {
            return Err(non_finite());
        }
        self.capture(component, path, CapturePhase::PostBend, forward_index, &x);
        Ok(x)
    }
}
