mod common;

use std::sync::Arc;

use bendlab_core::graph::SubmoduleInfo;
use bendlab_core::hooks::{BendSpec, CapturePhase, CaptureRequest, GenerationHooks, StepSchedule};
use bendlab_core::pipeline::{
    run_generation, wrap_backend, AdapterError, BackendAdapter, Capability, PipelineError, SampleOutput, ToyPipeline,
};
use bendlab_core::session::SessionError;
use bendlab_core::{
    build_toy_pipeline, ActivationTensor, BendRegistry, BendingOperator, Component, Embedding, GenerationParams,
    LayerPath, Session,
};

fn path(s: &str) -> LayerPath {
    LayerPath::parse(s).unwrap()
}

fn params() -> GenerationParams {
    GenerationParams::new("a lighthouse on a cliff", 42, 8).with_cfg(7.0)
}

fn png(session: &Session, p: &GenerationParams) -> Vec<u8> {
    session.generate(p).unwrap().png
}

/// Forwards to the toy backend, optionally hiding a capability or
/// skipping step announcements.
struct Wrapped {
    inner: ToyPipeline,
    hide: Option<Capability>,
    skip_steps: bool,
}

struct SkipSteps<'a>(&'a mut dyn GenerationHooks);

impl GenerationHooks for SkipSteps<'_> {
    fn notify_step(&mut self, _step_index: usize) -> Result<(), bendlab_core::hooks::HookError> {
        Ok(())
    }

    fn layer_output(
        &mut self,
        component: Component,
        path: &LayerPath,
        output: ActivationTensor,
    ) -> Result<ActivationTensor, bendlab_core::hooks::HookError> {
        self.0.layer_output(component, path, output)
    }
}

impl BackendAdapter for Wrapped {
    fn capabilities(&self) -> Vec<Capability> {
        Capability::ALL.into_iter().filter(|c| Some(*c) != self.hide).collect()
    }

    fn enumerate_submodules(&self, component: Component) -> Result<Vec<SubmoduleInfo>, AdapterError> {
        self.inner.enumerate_submodules(component)
    }

    fn embedding_shape(&self) -> (usize, usize) {
        self.inner.embedding_shape()
    }

    fn encode_text(&self, prompt: &str, hooks: &mut dyn GenerationHooks) -> Result<Embedding, PipelineError> {
        self.inner.encode_text(prompt, hooks)
    }

    fn sample(
        &self,
        params: &GenerationParams,
        cond: &Embedding,
        uncond: &Embedding,
        hooks: &mut dyn GenerationHooks,
    ) -> Result<SampleOutput, PipelineError> {
        if self.skip_steps {
            self.inner.sample(params, cond, uncond, &mut SkipSteps(hooks))
        } else {
            self.inner.sample(params, cond, uncond, hooks)
        }
    }

    fn decode(&self, latent: &ActivationTensor, hooks: &mut dyn GenerationHooks) -> Result<ActivationTensor, PipelineError> {
        self.inner.decode(latent, hooks)
    }
}

fn wrapped(hide: Option<Capability>, skip_steps: bool) -> Result<bendlab_core::PipelineHandle, AdapterError> {
    wrap_backend(Arc::new(Wrapped {
        inner: ToyPipeline::new(0),
        hide,
        skip_steps,
    }))
}

#[test]
fn wrapped_backend_matches_direct_use() {
    let a = Session::new(build_toy_pipeline(0));
    let mut b = Session::new(wrapped(None, false).unwrap());
    assert!(png(&a, &params()) == png(&b, &params()));
    for c in Component::ALL {
        assert_eq!(a.tree(c).unwrap(), b.tree(c).unwrap());
    }
    b.install(BendSpec::new("x", Component::Unet, path("diffusion_model.input_blocks.0.act"), BendingOperator::threshold(0.0)))
        .unwrap();
    assert!(png(&a, &params()) != png(&b, &params()));
}

#[test]
fn missing_capability_is_named() {
    for cap in Capability::ALL {
        let err = wrapped(Some(cap), false).unwrap_err();
        assert_eq!(err, AdapterError::MissingCapability(cap));
        assert_eq!(err.to_string(), cap.as_str());
    }
}

#[test]
fn silent_sampler_is_caught() {
    let s = Session::new(wrapped(None, true).unwrap());
    let err = s.generate(&params()).unwrap_err();
    assert!(matches!(err, SessionError::Pipeline(PipelineError::Adapter(AdapterError::Backend(_)))), "{err}");
}

#[test]
fn trees_are_well_formed() {
    let p = build_toy_pipeline(0);
    for c in Component::ALL {
        let tree = p.tree(c).unwrap();
        let walked = tree.walk();
        assert_eq!(walked.len(), tree.node_count());
        for (path, node) in &walked {
            assert_eq!(tree.resolve(path).unwrap(), *node);
            if node.bendable() {
                assert!(node.children().is_empty(), "{path} is bendable but has children");
            }
        }
        let json = tree.to_json();
        assert_eq!(&bendlab_core::ModelTree::from_json(&json).unwrap(), tree);
    }
}

#[test]
fn cfg_zero_ignores_the_prompt() {
    let s = Session::new(build_toy_pipeline(0));
    let mut a = params();
    a.cfg = 0.0;
    let mut b = a.clone();
    b.prompt = "something else entirely".into();
    let out = s.generate(&a).unwrap();
    assert_eq!(out.report.forwards_per_step, 1);
    assert!(out.png == png(&s, &b));
    let mut c = params();
    c.prompt = "something else entirely".into();
    assert!(png(&s, &params()) != png(&s, &c));
}

#[test]
fn overflow_is_reported_as_non_finite() {
    let mut s = Session::new(build_toy_pipeline(0));
    s.install(BendSpec::new(
        "boom",
        Component::Unet,
        path("diffusion_model.middle_block.0.in_layers"),
        BendingOperator::mul_scalar(1e30),
    ))
    .unwrap();
    let err = s.generate(&params()).unwrap_err();
    let SessionError::Pipeline(PipelineError::NonFiniteOutput { location, .. }) = &err else {
        panic!("expected non-finite output, got {err}");
    };
    assert!(location.starts_with("unet:diffusion_model"), "{location}");
    // the session stays usable
    assert!(!s.is_busy());
    s.remove_by_id("boom").unwrap();
    s.generate(&params()).unwrap();
}

#[test]
fn disabled_bends_do_not_run() {
    let base = png(&Session::new(build_toy_pipeline(0)), &params());
    let mut s = Session::new(build_toy_pipeline(0));
    s.install(
        BendSpec::new("off", Component::Unet, path("diffusion_model.middle_block.1.act"), BendingOperator::mul_scalar(-3.0)).disabled(),
    )
    .unwrap();
    let out = s.generate(&params()).unwrap();
    assert!(out.png == base);
    assert_eq!(out.report.bend_invocations["off"], 0);
}

#[test]
fn text_encoder_and_vae_bends_take_effect() {
    let p = params();
    let base = png(&Session::new(build_toy_pipeline(0)), &p);
    for (c, layer) in [
        (Component::TextEncoder, "text_encoder.encoder.0.self_attn"),
        (Component::Vae, "vae.decoder.1.conv"),
    ] {
        let mut s = Session::new(build_toy_pipeline(0));
        s.install(BendSpec::new("b", c, path(layer), BendingOperator::threshold(0.1))).unwrap();
        let out = s.generate(&p).unwrap();
        assert!(out.png != base, "{layer}");
        assert!(out.report.bend_invocations["b"] > 0);

        // gated away from the step where that component runs
        let mut s = Session::new(build_toy_pipeline(0));
        let never = if c == Component::Vae { (0, p.steps - 2) } else { (1, p.steps - 1) };
        s.install(
            BendSpec::new("b", c, path(layer), BendingOperator::threshold(0.1))
                .with_schedule(StepSchedule::range(never.0, never.1).unwrap()),
        )
        .unwrap();
        assert!(png(&s, &p) == base, "{layer} gated");
    }
}

#[test]
fn glob_bend_hits_every_matching_layer() {
    let p = build_toy_pipeline(0);
    let tree = p.tree(Component::Unet).unwrap();
    let mut reg = BendRegistry::new();
    let spec = BendSpec::new("acts", Component::Unet, path("x"), BendingOperator::mul_scalar(1.01))
        .with_targets(vec!["diffusion_model.*.*.act".parse().unwrap()]);
    reg.install(tree, spec).unwrap();
    assert_eq!(reg.installed()[0].resolved.len(), 8);
    let out = run_generation(&p, &reg, &[], &params(), vec![]).unwrap();
    assert_eq!(out.report.bend_invocations["acts"], 8 * 2 * params().steps as u64);
}

#[test]
fn captures_cover_requested_steps() {
    let p = build_toy_pipeline(0);
    let req = CaptureRequest::new(Component::Unet, path("diffusion_model.output_blocks.0.act"), CapturePhase::PreBend)
        .with_steps(StepSchedule::new(vec![(1, 2), (6, 6)]).unwrap());
    let out = run_generation(&p, &BendRegistry::new(), &[], &params(), vec![req]).unwrap();
    let steps: Vec<(usize, usize)> = out.captures.iter().map(|c| (c.step_index, c.forward_index)).collect();
    assert_eq!(steps, vec![(1, 0), (1, 1), (2, 0), (2, 1), (6, 0), (6, 1)]);
    assert!(out.captures.iter().all(|c| c.tensor.shape() == [1, 16, 4, 4]));

    let bad = CaptureRequest::new(Component::Unet, path("diffusion_model.output_blocks"), CapturePhase::PreBend);
    assert!(run_generation(&p, &BendRegistry::new(), &[], &params(), vec![bad]).is_err());
}

#[test]
fn invalid_params_rejected_before_running() {
    let s = Session::new(build_toy_pipeline(0));
    let mut p = params();
    p.latent_shape = [1, 3, 16, 16];
    assert!(s.generate(&p).is_err());
    let mut p = params();
    p.cfg = f64::NAN;
    assert!(matches!(s.generate(&p), Err(SessionError::Pipeline(PipelineError::InvalidParams(_)))));
}
