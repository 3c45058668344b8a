mod common;

use bendlab_core::dsl::{format_bend_expression, parse_bend_expression, DslError};
use bendlab_core::graph::{match_paths, PatternSegment};
use bendlab_core::hooks::StepSchedule;
use bendlab_core::{build_toy_pipeline, parse_recipe, serialize_recipe, Component, LayerPath, PathPattern, Recipe, Session};
use common::*;
use proptest::prelude::*;

/// Reference glob matcher: plain recursion over both segment lists.
fn glob_oracle(pattern: &[PatternSegment], path: &[String]) -> bool {
    match pattern.split_first() {
        None => path.is_empty(),
        Some((PatternSegment::AnyRun, rest)) => (0..=path.len()).any(|k| glob_oracle(rest, &path[k..])),
        Some((head, rest)) => match path.split_first() {
            None => false,
            Some((seg, tail)) => {
                let ok = match head {
                    PatternSegment::AnyOne => true,
                    PatternSegment::Exact(s) => &s.to_string() == seg,
                    PatternSegment::AnyRun => unreachable!(),
                };
                ok && glob_oracle(rest, tail)
            }
        },
    }
}

fn words(p: &LayerPath) -> Vec<String> {
    p.segments().iter().map(|s| s.to_string()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn pattern_matching_agrees_with_oracle(pattern in arb_pattern(), path in arb_layer_path()) {
        prop_assert_eq!(pattern.matches(&path), glob_oracle(pattern.segments(), &words(&path)));
    }

    #[test]
    fn tree_matching_agrees_with_oracle(pattern in arb_pattern()) {
        let p = build_toy_pipeline(0);
        let tree = p.tree(Component::Unet).unwrap();
        let want: Vec<LayerPath> = tree
            .walk()
            .into_iter()
            .map(|(path, _)| path)
            .filter(|path| glob_oracle(pattern.segments(), &words(path)))
            .collect();
        prop_assert_eq!(tree.match_paths(&pattern), want);
    }

    #[test]
    fn recipes_survive_a_session(r in arb_recipe()) {
        // only recipes whose bends install on the toy model
        let mut s = Session::new(build_toy_pipeline(0));
        if s.import_recipe(&r).is_ok() {
            prop_assert_eq!(serialize_recipe(&s.export_recipe()), serialize_recipe(&r));
        }
    }

    #[test]
    fn garbage_never_panics(text in ".{0,80}") {
        let _ = parse_bend_expression(&text);
        let _ = LayerPath::parse(&text);
        let _ = PathPattern::parse(&text);
        let _ = parse_recipe(&text);
    }
}

#[test]
fn glob_examples_on_the_toy_unet() {
    let p = build_toy_pipeline(0);
    let tree = p.tree(Component::Unet).unwrap();
    let count = |g: &str| match_paths(tree, g).unwrap().len();
    assert_eq!(count("diffusion_model"), 1);
    assert_eq!(count("diffusion_model.*"), 3);
    assert_eq!(count("diffusion_model.input_blocks.*"), 3);
    assert_eq!(count("**.in_layers"), 8);
    assert_eq!(count("diffusion_model.**.act"), 8);
    assert!(match_paths(tree, "diffusion_model.*_blocks").is_err());
    assert_eq!(count("**"), tree.node_count());
    assert_eq!(tree.node_count(), 28);
    assert!(match_paths(tree, "diffusion_model..x").is_err());
}

#[test]
fn expression_examples() {
    let spec = parse_bend_expression("unet:diffusion_model.middle_block.0.in_layers:rotate(theta_deg=45)@0-9~0.5").unwrap();
    assert_eq!(spec.component, Component::Unet);
    assert_eq!(spec.schedule, StepSchedule::range(0, 9).unwrap());
    assert_eq!(spec.operator.mix, 0.5);
    assert_eq!(
        format_bend_expression(&spec).unwrap(),
        "unet:diffusion_model.middle_block.0.in_layers:rotate(theta_deg=45)@0-9~0.5"
    );
    let explicit = parse_bend_expression("unet:diffusion_model.middle_block.0.in_layers:rotate(interp=1,theta_deg=45.0)@0-9~0.50").unwrap();
    assert_eq!(explicit, spec);

    let all = parse_bend_expression("vae:vae.decoder.*.act:erode(kernel=5)@all").unwrap();
    assert!(all.schedule.is_all());
    assert_eq!(format_bend_expression(&all).unwrap(), "vae:vae.decoder.*.act:erode(kernel=5)");
}

#[test]
fn expression_errors_point_at_the_problem() {
    type Case = (&'static str, usize, fn(&DslError) -> bool);
    let cases: [Case; 8] = [
        ("gpu:x:add_scalar(c=1)", 0, |e| matches!(e, DslError::Parse { .. })),
        ("unet:a..b:add_scalar(c=1)", 7, |e| matches!(e, DslError::Parse { .. })),
        ("unet:a.b:melt()", 9, |e| matches!(e, DslError::UnknownOperator { name, .. } if name == "melt")),
        ("unet:a.b:erode(kernel=4)", 15, |e| matches!(e, DslError::BadParamValue { param, .. } if param == "kernel")),
        ("unet:a.b:add_scalar(d=1)", 20, |e| matches!(e, DslError::BadParamValue { .. })),
        ("unet:a.b:add_scalar(c=1)@9-2", 25, |e| matches!(e, DslError::Parse { .. })),
        ("unet:a.b:add_scalar(c=1)~2", 25, |e| matches!(e, DslError::BadParamValue { param, .. } if param == "mix")),
        ("unet:a.b:add_scalar(c=1) ", 24, |e| matches!(e, DslError::Parse { .. })),
    ];
    for (text, pos, kind) in cases {
        let err = parse_bend_expression(text).unwrap_err();
        assert!(kind(&err), "{text}: {err:?}");
        assert_eq!(err.position(), Some(pos), "{text}: {err}");
    }
}

#[test]
fn recipe_imports_into_a_fresh_session() {
    let mut r = Recipe::new(bendlab_core::GenerationParams::new("dunes", 5, 6).with_cfg(4.0));
    r.bends.push(parse_bend_expression("unet:diffusion_model.output_blocks.*.act:scale_spatial(factor=1.25)@1-3").unwrap());
    r.bends.push(parse_bend_expression("text_encoder:text_encoder.final_layer_norm:mul_scalar(c=-1)").unwrap());
    r.conditioning_edits.push(bendlab_core::ConditioningEdit::Interpolate {
        other_prompt: "snow".into(),
        t: 0.25,
    });
    let text = serialize_recipe(&r);

    let render = || {
        let mut s = Session::new(build_toy_pipeline(0));
        s.import_recipe(&parse_recipe(&text).unwrap()).unwrap();
        let out = s.generate(&s.generation_params()).unwrap();
        assert_eq!(serialize_recipe(&s.export_recipe()), text);
        out.png
    };
    assert!(render() == render());
}
