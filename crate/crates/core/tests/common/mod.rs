//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use bendlab_core::graph::Segment;
use bendlab_core::hooks::{BendSpec, StepSchedule};
use bendlab_core::operators::{Interpolation, MorphologyKind};
use bendlab_core::pipeline::ConditioningEdit;
use bendlab_core::{ActivationTensor, BendingOperator, Component, GenerationParams, LayerPath, PathPattern, Recipe};
use proptest::prelude::*;

/// Brute-force square min/max filter with replicate padding: every output
/// pixel scans its full k×k window directly.
pub fn morph_oracle(x: &ActivationTensor, kind: MorphologyKind, kernel: usize) -> ActivationTensor {
    let [n, c, h, w] = x.shape();
    let r = (kernel / 2) as isize;
    let a = x.array();
    let mut out = vec![0.0f32; x.len()];
    let mut i = 0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc: Option<f32> = None;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                            let sx = (xx + dx).clamp(0, w as isize - 1) as usize;
                            let v = a[[b, ch, sy, sx]];
                            acc = Some(match (acc, kind) {
                                (None, _) => v,
                                (Some(m), MorphologyKind::Erode) => m.min(v),
                                (Some(m), MorphologyKind::Dilate) => m.max(v),
                            });
                        }
                    }
                    out[i] = acc.unwrap();
                    i += 1;
                }
            }
        }
    }
    ActivationTensor::from_vec([n, c, h, w], out).unwrap()
}

/// `(1 - m) x + m t` evaluated in f64.
pub fn blend_oracle(x: &ActivationTensor, t: &ActivationTensor, m: f64) -> Vec<f64> {
    x.as_slice()
        .iter()
        .zip(t.as_slice())
        .map(|(&a, &b)| (1.0 - m) * a as f64 + m * b as f64)
        .collect()
}

pub fn mean_std(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn negate(x: &ActivationTensor) -> ActivationTensor {
    x.map(|v| -v)
}

pub fn arb_shape(max_hw: usize) -> impl Strategy<Value = [usize; 4]> {
    (1usize..=2, 1usize..=3, 1..=max_hw, 1..=max_hw).prop_map(|(n, c, h, w)| [n, c, h, w])
}

fn tensor_from(shape: [usize; 4], values: impl Strategy<Value = f32> + 'static) -> impl Strategy<Value = ActivationTensor> {
    let len = shape.iter().product::<usize>();
    proptest::collection::vec(values, len).prop_map(move |v| ActivationTensor::from_vec(shape, v).unwrap())
}

pub fn arb_tensor() -> impl Strategy<Value = ActivationTensor> {
    arb_shape(10).prop_flat_map(|s| tensor_from(s, -10.0f32..10.0))
}

pub fn arb_int_tensor() -> impl Strategy<Value = ActivationTensor> {
    arb_shape(10).prop_flat_map(|s| tensor_from(s, (-20i32..=20).prop_map(|v| v as f32)))
}

/// Tensors whose planes are square.
pub fn arb_square_tensor() -> impl Strategy<Value = ActivationTensor> {
    (1usize..=2, 1usize..=3, 1usize..=10)
        .prop_flat_map(|(n, c, s)| tensor_from([n, c, s, s], -10.0f32..10.0))
}

pub fn arb_interp() -> impl Strategy<Value = Interpolation> {
    prop_oneof![Just(Interpolation::Nearest), Just(Interpolation::Bilinear)]
}

pub fn arb_kernel() -> impl Strategy<Value = usize> {
    (0usize..4).prop_map(|k| 2 * k + 1)
}

/// Operator of the named kind with random valid parameters and mix 1.
pub fn arb_operator_of(kind: &'static str) -> BoxedStrategy<BendingOperator> {
    match kind {
        "add_scalar" => (-5.0f64..5.0).prop_map(BendingOperator::add_scalar).boxed(),
        "mul_scalar" => (-3.0f64..3.0).prop_map(BendingOperator::mul_scalar).boxed(),
        "add_noise" => (0.0f64..2.0).prop_map(BendingOperator::add_noise).boxed(),
        "rotate" => (-360.0f64..360.0, arb_interp()).prop_map(|(t, i)| BendingOperator::rotate(t, i)).boxed(),
        "scale_spatial" => (0.25f64..4.0, arb_interp())
            .prop_map(|(f, i)| BendingOperator::scale_spatial(f, i))
            .boxed(),
        "erode" => arb_kernel().prop_map(BendingOperator::erode).boxed(),
        "dilate" => arb_kernel().prop_map(BendingOperator::dilate).boxed(),
        "threshold" => (-2.0f64..2.0).prop_map(BendingOperator::threshold).boxed(),
        "compose" => proptest::collection::vec(arb_leaf_operator(), 1..4)
            .prop_map(BendingOperator::compose)
            .boxed(),
        other => panic!("no generator for `{other}`"),
    }
}

pub fn arb_leaf_operator() -> impl Strategy<Value = BendingOperator> {
    let kinds = ["add_scalar", "mul_scalar", "add_noise", "rotate", "scale_spatial", "erode", "dilate", "threshold"];
    let leaves: Vec<_> = kinds.iter().map(|k| arb_operator_of(k)).collect();
    (proptest::strategy::Union::new(leaves), prop_oneof![3 => Just(1.0f64), 1 => 0.0f64..=1.0])
        .prop_map(|(op, mix)| op.with_mix(mix))
}

pub fn arb_segment() -> impl Strategy<Value = Segment> {
    prop_oneof![
        "[A-Za-z_][A-Za-z0-9_]{0,10}".prop_map(Segment::Name),
        (0usize..100_000).prop_map(Segment::Index),
    ]
}

pub fn arb_layer_path() -> impl Strategy<Value = LayerPath> {
    proptest::collection::vec(arb_segment(), 1..8).prop_map(|s| LayerPath::new(s).unwrap())
}

/// Pattern text built from names, indices, `*` and `**` (never `**` twice in a row).
pub fn arb_pattern() -> impl Strategy<Value = PathPattern> {
    let seg = prop_oneof![
        4 => arb_segment().prop_map(|s| s.to_string()),
        1 => Just("*".to_owned()),
        1 => Just("**".to_owned()),
    ];
    proptest::collection::vec(seg, 1..6).prop_map(|mut segs| {
        segs.dedup_by(|a, b| a == "**" && b == "**");
        PathPattern::parse(&segs.join(".")).unwrap()
    })
}

pub fn arb_component() -> impl Strategy<Value = Component> {
    prop_oneof![Just(Component::Unet), Just(Component::Vae), Just(Component::TextEncoder)]
}

pub fn arb_schedule() -> impl Strategy<Value = StepSchedule> {
    proptest::collection::vec((0usize..1000, 0usize..50), 0..3)
        .prop_map(|r| StepSchedule::new(r.into_iter().map(|(lo, len)| (lo, lo + len)).collect()).unwrap())
}

/// Finite doubles across the whole exponent range.
pub fn any_finite() -> impl Strategy<Value = f64> {
    proptest::num::f64::NORMAL | proptest::num::f64::ZERO | proptest::num::f64::SUBNORMAL
}

fn positive_finite() -> impl Strategy<Value = f64> {
    proptest::num::f64::POSITIVE.prop_filter("finite and non-zero", |v| v.is_finite() && *v > 0.0)
}

/// Any valid operator, parameters drawn from the whole f64 range where the
/// kind allows it.
pub fn arb_recipe_operator() -> impl Strategy<Value = BendingOperator> {
    let mix = prop_oneof![Just(1.0f64), Just(0.0f64), 0.0f64..=1.0];
    let leaf = prop_oneof![
        any_finite().prop_map(BendingOperator::add_scalar),
        any_finite().prop_map(BendingOperator::mul_scalar),
        prop_oneof![Just(0.0), positive_finite()].prop_map(BendingOperator::add_noise),
        (any_finite(), arb_interp()).prop_map(|(t, i)| BendingOperator::rotate(t, i)),
        (positive_finite(), arb_interp()).prop_map(|(f, i)| BendingOperator::scale_spatial(f, i)),
        (0usize..50).prop_map(|k| BendingOperator::erode(2 * k + 1)),
        (0usize..50).prop_map(|k| BendingOperator::dilate(2 * k + 1)),
        any_finite().prop_map(BendingOperator::threshold),
    ];
    let leaf = (leaf, mix.clone()).prop_map(|(op, m)| op.with_mix(m));
    leaf.prop_recursive(2, 8, 3, move |inner| {
        (proptest::collection::vec(inner, 1..4), mix.clone())
            .prop_map(|(ops, m)| BendingOperator::compose(ops).with_mix(m))
    })
}

pub fn arb_edit() -> impl Strategy<Value = ConditioningEdit> {
    prop_oneof![
        (prop_oneof![Just(0.0), positive_finite()], any::<u64>())
            .prop_map(|(sigma, edit_seed)| ConditioningEdit::Perturb { sigma, edit_seed }),
        (".{0,24}", 0.0f64..=1.0).prop_map(|(other_prompt, t)| ConditioningEdit::Interpolate { other_prompt, t }),
        any_finite().prop_map(|factor| ConditioningEdit::Scale { factor }),
        proptest::collection::vec(any_finite(), 0..8).prop_map(|direction| ConditioningEdit::Offset { direction }),
    ]
}

pub fn arb_generation() -> impl Strategy<Value = GenerationParams> {
    (
        ".{0,40}",
        proptest::option::of(".{0,20}"),
        any::<u64>(),
        1usize..=1000,
        prop_oneof![Just(0.0), Just(7.0), 0.0f64..30.0],
        "[a-z0-9_]{1,12}",
        "[a-z0-9_]{1,12}",
        (1usize..=2, 1usize..=8, 1usize..=64, 1usize..=64),
    )
        .prop_map(|(prompt, negative_prompt, seed, steps, cfg, sampler_id, scheduler_id, (n, c, h, w))| {
            GenerationParams {
                prompt,
                negative_prompt,
                seed,
                steps,
                cfg,
                sampler_id,
                scheduler_id,
                latent_shape: [n, c, h, w],
            }
        })
}

pub fn arb_bend(index: usize) -> impl Strategy<Value = BendSpec> {
    (
        "[A-Za-z0-9_.-]{0,12}",
        arb_component(),
        proptest::collection::vec(arb_pattern(), 1..4),
        arb_recipe_operator(),
        arb_schedule(),
        any::<bool>(),
    )
        .prop_map(move |(stem, component, targets, operator, schedule, enabled)| BendSpec {
            id: format!("{stem}{index}"),
            component,
            targets,
            operator,
            schedule,
            enabled,
        })
}

pub fn arb_recipe() -> impl Strategy<Value = Recipe> {
    (0usize..5)
        .prop_flat_map(|n| {
            let bends: Vec<_> = (0..n).map(arb_bend).collect();
            (bends, proptest::collection::vec(arb_edit(), 0..4), arb_generation())
        })
        .prop_map(|(bends, conditioning_edits, generation)| Recipe {
            version: 1,
            bends,
            conditioning_edits,
            generation,
        })
}

/// Recipe documents that must be rejected, each with the error name and a
/// fragment the message must contain.
pub const INVALID_RECIPES: &[(&str, &str, &str)] = &[
    ("", "schema", "line 1"),
    ("not json", "schema", "line 1"),
    ("[]", "schema", "object"),
    ("{}", "schema", "version"),
    (r#"{"version": 99}"#, "version", "99"),
    (r#"{"version": 0}"#, "version", "0"),
    (r#"{"version": -1}"#, "version", "-1"),
    (r#"{"version": 1.5}"#, "version", "1.5"),
    (r#"{"version": "1"}"#, "schema", "version"),
    (r#"{"version": 1}"#, "schema", "bends"),
    (r#"{"version": 1, "bends": [], "conditioning_edits": []}"#, "schema", "generation"),
    (
        r#"{"version": 1, "bends": [], "conditioning_edits": [], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}, "extra": 1}"#,
        "schema",
        "extra",
    ),
    (
        r#"{"version": 1, "bends": [], "conditioning_edits": [], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 0, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "generation",
    ),
    (
        r#"{"version": 1, "bends": [], "conditioning_edits": [], "generation": {"prompt": "x", "negative_prompt": 3, "seed": 1, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "generation.negative_prompt",
    ),
    (
        r#"{"version": 1, "bends": [], "conditioning_edits": [], "generation": {"prompt": "x", "negative_prompt": null, "seed": -4, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "generation.seed",
    ),
    (
        r#"{"version": 1, "bends": [], "conditioning_edits": [], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 20, "cfg": -7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "generation",
    ),
    (
        r#"{"version": 1, "bends": [], "conditioning_edits": [], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16]}}"#,
        "schema",
        "generation.latent_shape",
    ),
    (
        r#"{"version": 1, "bends": [{"id": "a", "component": "unet", "targets": ["diffusion_model"], "operator": {"kind": "melt", "params": {}, "mix": 1.0}, "schedule": {"ranges": []}, "enabled": true}], "conditioning_edits": [], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "melt",
    ),
    (
        r#"{"version": 1, "bends": [{"id": "a", "component": "unet", "targets": ["diffusion_model"], "operator": {"kind": "mul_scalar", "params": {"c": 2.0}, "mix": 1.5}, "schedule": {"ranges": []}, "enabled": true}], "conditioning_edits": [], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "mix",
    ),
    (
        r#"{"version": 1, "bends": [{"id": "a", "component": "unet", "targets": ["diffusion_model"], "operator": {"kind": "erode", "params": {"kernel": 4}, "mix": 1.0}, "schedule": {"ranges": []}, "enabled": true}], "conditioning_edits": [], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "kernel",
    ),
    (
        r#"{"version": 1, "bends": [{"id": "a", "component": "unet", "targets": ["a..b"], "operator": {"kind": "mul_scalar", "params": {"c": 2.0}, "mix": 1.0}, "schedule": {"ranges": []}, "enabled": true}], "conditioning_edits": [], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "bends[0].targets",
    ),
    (
        r#"{"version": 1, "bends": [{"id": "a", "component": "gpu", "targets": ["x"], "operator": {"kind": "mul_scalar", "params": {"c": 2.0}, "mix": 1.0}, "schedule": {"ranges": []}, "enabled": true}], "conditioning_edits": [], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "gpu",
    ),
    (
        r#"{"version": 1, "bends": [{"id": "a", "component": "unet", "targets": ["x"], "operator": {"kind": "mul_scalar", "params": {"c": 2.0}, "mix": 1.0}, "schedule": {"ranges": [[5, 2]]}, "enabled": true}], "conditioning_edits": [], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "lo > hi",
    ),
    (
        r#"{"version": 1, "bends": [{"id": "a", "component": "unet", "targets": ["x"], "operator": {"kind": "mul_scalar", "params": {"c": 2.0}, "mix": 1.0}, "schedule": {"ranges": []}, "enabled": true}, {"id": "a", "component": "unet", "targets": ["y"], "operator": {"kind": "mul_scalar", "params": {"c": 2.0}, "mix": 1.0}, "schedule": {"ranges": []}, "enabled": true}], "conditioning_edits": [], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "bends[1].id",
    ),
    (
        r#"{"version": 1, "bends": [], "conditioning_edits": [{"kind": "perturb", "sigma": -1.0, "edit_seed": 3}], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "conditioning_edits[0]",
    ),
    (
        r#"{"version": 1, "bends": [], "conditioning_edits": [{"kind": "interpolate", "other_prompt": "y", "t": 2.0}], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "conditioning_edits[0]",
    ),
    (
        r#"{"version": 1, "bends": [], "conditioning_edits": [{"kind": "sharpen"}], "generation": {"prompt": "x", "negative_prompt": null, "seed": 1, "steps": 20, "cfg": 7.0, "sampler_id": "a", "scheduler_id": "b", "latent_shape": [1, 4, 16, 16]}}"#,
        "schema",
        "sharpen",
    ),
];
