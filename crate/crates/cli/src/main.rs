use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bendlab_core::dsl::{parse_bend_expression, DslError};
use bendlab_core::featureviz::{NormalizeMode, ReductionSpec, VizError};
use bendlab_core::hooks::HookError;
use bendlab_core::pipeline::PipelineError;
use bendlab_core::session::SessionError;
use bendlab_core::{
    build_toy_pipeline, parse_recipe, CapturePhase, CaptureRequest, Component, GenerationParams, LayerPath,
    ModuleKind, Session, StepSchedule,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

mod serve;

#[derive(Parser)]
#[command(name = "bendlab", version, about = "Bend the layers of a small latent-diffusion pipeline")]
struct Cli {
    /// Seed for the toy model weights.
    #[arg(long, global = true, default_value_t = 0)]
    model_seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a component's module tree.
    InspectTree {
        #[arg(long, default_value = "unet", value_parser = parse_component)]
        component: Component,
        /// Stop expanding below this depth.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// List bendable layer paths.
    Layers {
        #[arg(long, default_value = "unet", value_parser = parse_component)]
        component: Component,
        /// Only layers of this kind (conv, attention, normalization, nonlinearity).
        #[arg(long, value_parser = parse_kind)]
        kind: Option<ModuleKind>,
    },
    /// Generate an image, writing a PNG and a JSON run report next to it.
    Generate {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Capture a layer's activations during a generation as a PNG grid.
    Capture {
        #[arg(long)]
        path: LayerPath,
        /// Sampler steps to capture, `lo-hi` or a single step.
        #[arg(long = "steps", value_parser = parse_step_range)]
        capture_steps: Option<StepSchedule>,
        #[arg(long, value_enum, default_value_t = Phase::Post)]
        phase: Phase,
        /// mean, abs_mean, l2 or channel:k
        #[arg(long, default_value = "mean", value_parser = parse_reduction)]
        reduce: ReductionSpec,
        #[arg(long, value_enum, default_value_t = Normalize::Minmax)]
        normalize: Normalize,
        #[arg(long)]
        columns: Option<usize>,
        /// Sampler steps in the generation (default 20, or the recipe's).
        #[arg(long)]
        gen_steps: Option<usize>,
        #[command(flatten)]
        gen: SharedGenArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that a recipe file parses and installs on the toy model.
    RecipeValidate { file: PathBuf },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = bendlab_core::service::PORT_ENV, default_value_t = bendlab_core::service::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Args)]
struct GenArgs {
    /// Sampler steps (default 20, or the recipe's).
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    shared: SharedGenArgs,
}

#[derive(Args)]
struct SharedGenArgs {
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    negative_prompt: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cfg: Option<f64>,
    /// Bend expression, e.g. `unet:diffusion_model.middle_block.0.in_layers:rotate(theta_deg=30)@0-9~0.5`.
    #[arg(long = "bend")]
    bends: Vec<String>,
    /// Recipe to load before applying `--bend` and the flags above.
    #[arg(long)]
    recipe: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Phase {
    Pre,
    Post,
}

#[derive(Clone, Copy, ValueEnum)]
enum Normalize {
    Minmax,
    /// Clip to the 1st and 99th percentiles first.
    Percentile,
}

#[derive(Debug)]
enum CliError {
    /// Bad input: exit 1.
    Invalid(String),
    /// Something went wrong while running: exit 2.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (CliError::Invalid(m) | CliError::Runtime(m)) = self;
        // diagnostics stay on one line
        f.write_str(&m.replace('\n', " "))
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        let runtime = match &e {
            SessionError::Hook(h) | SessionError::Pipeline(PipelineError::Hook(h)) => hook_is_runtime(h),
            SessionError::Viz(v) | SessionError::Pipeline(PipelineError::Viz(v)) => viz_is_runtime(v),
            SessionError::Pipeline(p) => !matches!(p, PipelineError::InvalidParams(_) | PipelineError::InvalidEdit(_)),
            SessionError::Recipe(_)
            | SessionError::UnknownBend(_)
            | SessionError::UnknownEdit(_)
            | SessionError::UnknownComponent(_)
            | SessionError::EmptyCapture => false,
        };
        if runtime {
            CliError::Runtime(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

fn hook_is_runtime(e: &HookError) -> bool {
    matches!(
        e,
        HookError::Operator { .. } | HookError::NonFinite { .. } | HookError::OutOfOrderStep { .. } | HookError::StepOutOfRange { .. }
    )
}

fn viz_is_runtime(e: &VizError) -> bool {
    !matches!(e, VizError::ChannelOutOfRange { .. } | VizError::Invalid(_))
}

impl From<DslError> for CliError {
    fn from(e: DslError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

fn parse_component(s: &str) -> Result<Component, String> {
    Component::parse(s).ok_or_else(|| format!("unknown component `{s}` (expected unet, vae or text_encoder)"))
}

fn parse_kind(s: &str) -> Result<ModuleKind, String> {
    ModuleKind::parse(s).ok_or_else(|| format!("unknown module kind `{s}`"))
}

fn parse_step_range(s: &str) -> Result<StepSchedule, String> {
    let (lo, hi) = s.split_once('-').unwrap_or((s, s));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad step range `{s}` (expected lo-hi)"));
    StepSchedule::range(num(lo)?, num(hi)?)
}

fn parse_reduction(s: &str) -> Result<ReductionSpec, String> {
    ReductionSpec::parse(s).map_err(|e| e.to_string())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn report_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

/// Session with the recipe, then the `--bend` expressions, installed, and
/// the generation parameters those imply.
fn prepare(shared: &SharedGenArgs, steps: Option<usize>, model_seed: u64) -> Result<(Session, GenerationParams), CliError> {
    let mut session = Session::new(build_toy_pipeline(model_seed));
    let mut params = GenerationParams::new("", 42, 20);
    if let Some(file) = &shared.recipe {
        let text = fs::read_to_string(file)
            .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", file.display())))?;
        let recipe = parse_recipe(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", file.display())))?;
        session.import_recipe(&recipe)?;
        params = recipe.generation;
    }
    if let Some(steps) = steps {
        params.steps = steps;
    }
    for expr in &shared.bends {
        let spec = parse_bend_expression(expr).map_err(|e| CliError::Invalid(format!("--bend `{expr}`: {e}")))?;
        session.install(spec)?;
    }
    if let Some(p) = &shared.prompt {
        params.prompt.clone_from(p);
    }
    if shared.negative_prompt.is_some() {
        params.negative_prompt.clone_from(&shared.negative_prompt);
    }
    if let Some(seed) = shared.seed {
        params.seed = seed;
    }
    if let Some(cfg) = shared.cfg {
        params.cfg = cfg;
    }
    params.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok((session, params))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::InspectTree { component, depth, json } => {
            let pipeline = build_toy_pipeline(cli.model_seed);
            let tree = pipeline.tree(component).map_err(|e| CliError::Invalid(e.to_string()))?;
            if json {
                println!("{}", tree.to_json());
            } else {
                print!("{}", tree.render(depth));
            }
        }
        Command::Layers { component, kind } => {
            let pipeline = build_toy_pipeline(cli.model_seed);
            let tree = pipeline.tree(component).map_err(|e| CliError::Invalid(e.to_string()))?;
            for path in tree.bendable_layers(kind) {
                let node = tree.resolve(&path).map_err(|e| CliError::Runtime(e.to_string()))?;
                println!("{path}\t{}", node.kind().as_str());
            }
        }
        Command::Generate { gen, out } => {
            let (session, params) = prepare(&gen.shared, gen.steps, cli.model_seed)?;
            let output = session.generate(&params)?;
            write(&out, &output.png)?;
            let report = json!({ "params": params, "report": output.report });
            write(&report_path(&out), serde_json::to_string_pretty(&report).expect("report serializes").as_bytes())?;
            println!("{} {}", out.display(), output.report.image_sha256);
        }
        Command::Capture {
            path,
            capture_steps,
            phase,
            reduce,
            normalize,
            columns,
            gen_steps,
            gen,
            out,
        } => {
            let (session, params) = prepare(&gen, gen_steps, cli.model_seed)?;
            let component = session
                .component_of(&path)
                .ok_or_else(|| CliError::Invalid(format!("`{path}` does not name a layer in any component")))?;
            let phase = match phase {
                Phase::Pre => CapturePhase::PreBend,
                Phase::Post => CapturePhase::PostBend,
            };
            let mut request = CaptureRequest::new(component, path, phase);
            if let Some(steps) = capture_steps {
                request = request.with_steps(steps);
            }
            let mode = match normalize {
                Normalize::Minmax => NormalizeMode::MinMax,
                Normalize::Percentile => NormalizeMode::Percentile { lo: 1.0, hi: 99.0 },
            };
            let grid = session.capture_grid(&params, request, reduce, mode, columns)?;
            write(&out, &grid.png)?;
            let sidecar = json!({ "params": params, "tiles": grid.tiles, "report": grid.output.report });
            write(&report_path(&out), serde_json::to_string_pretty(&sidecar).expect("sidecar serializes").as_bytes())?;
            println!("{} {} tiles", out.display(), grid.tiles.len());
        }
        Command::RecipeValidate { file } => {
            let text = fs::read_to_string(&file)
                .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", file.display())))?;
            let recipe = parse_recipe(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", file.display())))?;
            let mut session = Session::new(build_toy_pipeline(cli.model_seed));
            session
                .import_recipe(&recipe)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", file.display())))?;
            println!("{}: ok ({} bends, {} conditioning edits)", file.display(), recipe.bends.len(), recipe.conditioning_edits.len());
        }
        Command::Serve { port, host } => serve::run(&host, port, cli.model_seed)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("bendlab: {}", line.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bendlab: {e}");
            ExitCode::from(e.code())
        }
    }
}
