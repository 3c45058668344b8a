//! A desk-scale text encoder, UNet and VAE with Stable-Diffusion-style names.

use ndarray::Array2;

use super::nn::{self, init_normals, Conv2d};
use super::{
    initial_latent, AdapterError, BackendAdapter, Capability, Embedding, GenerationParams, PipelineError,
    SampleOutput,
};
use crate::graph::{Component, LayerPath, ModuleKind, Segment, SubmoduleInfo};
use crate::hooks::GenerationHooks;
use crate::rng::{keyed_stream, standard_normals};
use crate::tensor::ActivationTensor;

pub const EMBED_TOKENS: usize = 16;
pub const EMBED_WIDTH: usize = 32;
const LATENT_CHANNELS: usize = 4;
const STEP_SIZE: f32 = 0.1;

fn path(text: &str) -> LayerPath {
    LayerPath::parse(text).expect("static path")
}

fn child(p: &LayerPath, name: &str) -> LayerPath {
    p.child(Segment::from_child_name(name).expect("static segment"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Silu,
    Tanh,
}

impl Act {
    fn apply(self, x: &ActivationTensor) -> ActivationTensor {
        match self {
            Act::Silu => nn::silu(x),
            Act::Tanh => nn::tanh(x),
        }
    }
}

/// conv 3×3 (`in_layers`) then SiLU (`act`), with a step embedding and a
/// pooled-conditioning projection added per channel in between.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlock {
    path: LayerPath,
    conv: Conv2d,
    time_freq: Vec<f32>,
    time_phase: Vec<f32>,
    /// channels × EMBED_WIDTH, row-major
    cond_proj: Vec<f32>,
}

impl ToyBlock {
    fn init(init_seed: u64, path: LayerPath, cin: usize, cout: usize) -> Self {
        let name = path.to_string();
        let conv = Conv2d::init(init_seed, &format!("{name}.in_layers"), cin, cout);
        let time_freq = (0..cout)
            .map(|c| (-(1000f32.ln()) * c as f32 / cout as f32).exp())
            .collect();
        let time_phase = init_normals(init_seed, &format!("{name}.time_phase"), cout, 1.0);
        let cond_proj = init_normals(
            init_seed,
            &format!("{name}.cond_proj"),
            cout * EMBED_WIDTH,
            0.5 / (EMBED_WIDTH as f32).sqrt(),
        );
        Self {
            path,
            conv,
            time_freq,
            time_phase,
            cond_proj,
        }
    }

    pub fn path(&self) -> &LayerPath {
        &self.path
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn in_layers_path(&self) -> LayerPath {
        child(&self.path, "in_layers")
    }

    pub fn act_path(&self) -> LayerPath {
        child(&self.path, "act")
    }

    fn channel_bias(&self, step: usize, pooled: &[f32]) -> Vec<f32> {
        (0..self.conv.out_channels())
            .map(|c| {
                let temb = 0.1 * (step as f32 * self.time_freq[c] + self.time_phase[c]).sin();
                let row = &self.cond_proj[c * EMBED_WIDTH..][..EMBED_WIDTH];
                let proj: f32 = row.iter().zip(pooled).map(|(w, p)| w * p).sum();
                temb + proj
            })
            .collect()
    }

    fn forward(
        &self,
        x: &ActivationTensor,
        step: usize,
        pooled: &[f32],
        hooks: &mut dyn GenerationHooks,
    ) -> Result<ActivationTensor, PipelineError> {
        let h = self.conv.forward(x);
        let mut h = hooks.layer_output(Component::Unet, &self.in_layers_path(), h)?;
        nn::add_channel_bias(&mut h, &self.channel_bias(step, pooled));
        let h = nn::silu(&h);
        Ok(hooks.layer_output(Component::Unet, &self.act_path(), h)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyUnet {
    root: LayerPath,
    input_blocks: Vec<ToyBlock>,
    middle_block: Vec<ToyBlock>,
    output_blocks: Vec<ToyBlock>,
}

impl ToyUnet {
    const GROUPS: [&'static str; 3] = ["input_blocks", "middle_block", "output_blocks"];

    fn init(init_seed: u64) -> Self {
        let root = path("diffusion_model");
        let group = |name: &str, dims: &[(usize, usize)]| -> Vec<ToyBlock> {
            let g = child(&root, name);
            dims.iter()
                .enumerate()
                .map(|(i, &(cin, cout))| ToyBlock::init(init_seed, g.child(Segment::Index(i)), cin, cout))
                .collect()
        };
        let input_blocks = group("input_blocks", &[(LATENT_CHANNELS, 8), (8, 16), (16, 32)]);
        let middle_block = group("middle_block", &[(32, 32), (32, 32)]);
        // output convs see the upsampled path concatenated with the matching skip
        let output_blocks = group("output_blocks", &[(32 + 32, 16), (16 + 16, 8), (8 + 8, LATENT_CHANNELS)]);
        Self {
            root,
            input_blocks,
            middle_block,
            output_blocks,
        }
    }

    pub fn root(&self) -> &LayerPath {
        &self.root
    }

    pub fn input_blocks(&self) -> &[ToyBlock] {
        &self.input_blocks
    }

    pub fn middle_block(&self) -> &[ToyBlock] {
        &self.middle_block
    }

    pub fn output_blocks(&self) -> &[ToyBlock] {
        &self.output_blocks
    }

    fn groups(&self) -> [(&'static str, &[ToyBlock]); 3] {
        [
            (Self::GROUPS[0], &self.input_blocks),
            (Self::GROUPS[1], &self.middle_block),
            (Self::GROUPS[2], &self.output_blocks),
        ]
    }

    fn submodules(&self) -> Vec<SubmoduleInfo> {
        let mut out = vec![SubmoduleInfo::new(self.root.clone(), ModuleKind::Container)];
        for (name, blocks) in self.groups() {
            out.push(SubmoduleInfo::new(child(&self.root, name), ModuleKind::Container));
            for b in blocks {
                out.push(SubmoduleInfo::new(b.path.clone(), ModuleKind::Container));
                out.push(SubmoduleInfo::new(b.in_layers_path(), ModuleKind::Conv).with_params(b.conv.param_shapes()));
                out.push(SubmoduleInfo::new(b.act_path(), ModuleKind::Nonlinearity));
            }
        }
        out
    }

    /// Noise prediction for a B×4×H×W latent (H, W divisible by 4).
    pub fn forward(
        &self,
        x: &ActivationTensor,
        step: usize,
        cond: &Embedding,
        hooks: &mut dyn GenerationHooks,
    ) -> Result<ActivationTensor, PipelineError> {
        check_latent(x.shape())?;
        let pooled = cond.pooled();
        let [in0, in1, in2] = [&self.input_blocks[0], &self.input_blocks[1], &self.input_blocks[2]];
        let skip0 = in0.forward(x, step, &pooled, hooks)?;
        let skip1 = in1.forward(&nn::avg_pool2(&skip0), step, &pooled, hooks)?;
        let skip2 = in2.forward(&nn::avg_pool2(&skip1), step, &pooled, hooks)?;
        let mut h = skip2.clone();
        for b in &self.middle_block {
            h = b.forward(&h, step, &pooled, hooks)?;
        }
        let h = self.output_blocks[0].forward(&nn::cat_channels(&h, &skip2), step, &pooled, hooks)?;
        let h = nn::upsample2(&h);
        let h = self.output_blocks[1].forward(&nn::cat_channels(&h, &skip1), step, &pooled, hooks)?;
        let h = nn::upsample2(&h);
        self.output_blocks[2].forward(&nn::cat_channels(&h, &skip0), step, &pooled, hooks)
    }
}

fn check_latent(shape: [usize; 4]) -> Result<(), PipelineError> {
    let [_, c, h, w] = shape;
    if c != LATENT_CHANNELS || h % 4 != 0 || w % 4 != 0 {
        return Err(PipelineError::InvalidParams(format!(
            "toy latents are B×{LATENT_CHANNELS}×H×W with H, W divisible by 4, got {shape:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeBlock {
    path: LayerPath,
    conv: Conv2d,
    act: Act,
}

impl VaeBlock {
    pub fn path(&self) -> &LayerPath {
        &self.path
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    fn forward(&self, x: &ActivationTensor, hooks: &mut dyn GenerationHooks) -> Result<ActivationTensor, PipelineError> {
        let h = hooks.layer_output(Component::Vae, &child(&self.path, "conv"), self.conv.forward(x))?;
        Ok(hooks.layer_output(Component::Vae, &child(&self.path, "act"), self.act.apply(&h))?)
    }
}

/// Decoder doubles the spatial size and maps 4 latent channels to RGB; the
/// encoder goes the other way.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVae {
    root: LayerPath,
    encoder: Vec<VaeBlock>,
    decoder: Vec<VaeBlock>,
}

impl ToyVae {
    fn init(init_seed: u64) -> Self {
        let root = path("vae");
        let block = |group: &str, i: usize, cin, cout, act| {
            let p = child(&root, group).child(Segment::Index(i));
            let conv = Conv2d::init(init_seed, &format!("{p}.conv"), cin, cout);
            VaeBlock { path: p, conv, act }
        };
        let encoder = vec![block("encoder", 0, 3, 16, Act::Silu), block("encoder", 1, 16, LATENT_CHANNELS, Act::Tanh)];
        let decoder = vec![block("decoder", 0, LATENT_CHANNELS, 16, Act::Silu), block("decoder", 1, 16, 3, Act::Tanh)];
        Self { root, encoder, decoder }
    }

    pub fn encoder(&self) -> &[VaeBlock] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[VaeBlock] {
        &self.decoder
    }

    fn submodules(&self) -> Vec<SubmoduleInfo> {
        let mut out = vec![SubmoduleInfo::new(self.root.clone(), ModuleKind::Container)];
        for (name, blocks) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            out.push(SubmoduleInfo::new(child(&self.root, name), ModuleKind::Container));
            for b in blocks {
                out.push(SubmoduleInfo::new(b.path.clone(), ModuleKind::Container));
                out.push(SubmoduleInfo::new(child(&b.path, "conv"), ModuleKind::Conv).with_params(b.conv.param_shapes()));
                out.push(SubmoduleInfo::new(child(&b.path, "act"), ModuleKind::Nonlinearity));
            }
        }
        out
    }

    pub fn decode(&self, z: &ActivationTensor, hooks: &mut dyn GenerationHooks) -> Result<ActivationTensor, PipelineError> {
        let h = self.decoder[0].forward(z, hooks)?;
        self.decoder[1].forward(&nn::upsample2(&h), hooks)
    }

    /// B×3×H×W (H, W even) to B×4×H/2×W/2.
    pub fn encode(&self, img: &ActivationTensor, hooks: &mut dyn GenerationHooks) -> Result<ActivationTensor, PipelineError> {
        let [_, c, h, w] = img.shape();
        if c != 3 || h % 2 != 0 || w % 2 != 0 {
            return Err(PipelineError::ShapeMismatch {
                expected: vec![3, h - h % 2, w - w % 2],
                got: vec![c, h, w],
            });
        }
        let h = self.encoder[0].forward(img, hooks)?;
        self.encoder[1].forward(&nn::avg_pool2(&h), hooks)
    }
}

/// Prompt bytes to a 16×32 embedding: a seeded hash expansion per word
/// (up to 15 words) plus an end-of-text row keyed by the whole prompt, then
/// one residual self-attention layer and a gain-only layer norm. The empty
/// prompt maps to all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEncoder {
    init_seed: u64,
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    gamma: Vec<f32>,
}

impl ToyTextEncoder {
    fn init(init_seed: u64) -> Self {
        let scale = 1.0 / (EMBED_WIDTH as f32).sqrt();
        let mat = |name: &str| {
            Array2::from_shape_vec(
                (EMBED_WIDTH, EMBED_WIDTH),
                init_normals(init_seed, &format!("text_encoder.encoder.0.self_attn.{name}"), EMBED_WIDTH * EMBED_WIDTH, scale),
            )
            .expect("square")
        };
        let gamma = init_normals(init_seed, "text_encoder.final_layer_norm.weight", EMBED_WIDTH, 0.1)
            .into_iter()
            .map(|v| 1.0 + v)
            .collect();
        Self {
            init_seed,
            wq: mat("q"),
            wk: mat("k"),
            wv: mat("v"),
            gamma,
        }
    }

    fn submodules(&self) -> Vec<SubmoduleInfo> {
        let w = EMBED_WIDTH;
        vec![
            SubmoduleInfo::new(path("text_encoder"), ModuleKind::Container),
            SubmoduleInfo::new(path("text_encoder.token_embedding"), ModuleKind::Embedding),
            SubmoduleInfo::new(path("text_encoder.encoder"), ModuleKind::Container),
            SubmoduleInfo::new(path("text_encoder.encoder.0"), ModuleKind::Container),
            SubmoduleInfo::new(path("text_encoder.encoder.0.self_attn"), ModuleKind::Attention)
                .with_params(vec![vec![w, w]; 3]),
            SubmoduleInfo::new(path("text_encoder.final_layer_norm"), ModuleKind::Normalization)
                .with_params(vec![vec![w]]),
        ]
    }

    pub fn token_rows(&self, prompt: &str) -> Array2<f32> {
        let mut m = Array2::zeros((EMBED_TOKENS, EMBED_WIDTH));
        if prompt.is_empty() {
            return m;
        }
        let seed = self.init_seed.to_le_bytes();
        for (i, word) in prompt.split_whitespace().take(EMBED_TOKENS - 1).enumerate() {
            let mut rng = keyed_stream("toy-token", &[&seed, word.as_bytes(), &(i as u64).to_le_bytes()]);
            m.row_mut(i).assign(&ndarray::Array1::from(standard_normals(&mut rng, EMBED_WIDTH)));
        }
        let mut rng = keyed_stream("toy-eot", &[&seed, prompt.as_bytes()]);
        m.row_mut(EMBED_TOKENS - 1)
            .assign(&ndarray::Array1::from(standard_normals(&mut rng, EMBED_WIDTH)));
        m
    }

    pub fn encode(&self, prompt: &str, hooks: &mut dyn GenerationHooks) -> Result<Embedding, PipelineError> {
        let x = self.token_rows(prompt);
        let q = x.dot(&self.wq);
        let k = x.dot(&self.wk);
        let v = x.dot(&self.wv);
        let mut scores = q.dot(&k.t()) / (EMBED_WIDTH as f32).sqrt();
        for mut row in scores.rows_mut() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            row.mapv_inplace(|s| (s - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|s| s / sum);
        }
        let attn = ActivationTensor::from_matrix(&scores.dot(&v)).expect("non-empty");
        let attn = hooks.layer_output(Component::TextEncoder, &path("text_encoder.encoder.0.self_attn"), attn)?;
        if attn.shape() != [1, 1, EMBED_TOKENS, EMBED_WIDTH] {
            return Err(PipelineError::ShapeMismatch {
                expected: vec![1, 1, EMBED_TOKENS, EMBED_WIDTH],
                got: attn.shape().to_vec(),
            });
        }
        let h = x + attn.to_matrix();
        let mut normed = h.clone();
        for mut row in normed.rows_mut() {
            let n = EMBED_WIDTH as f32;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for (v, g) in row.iter_mut().zip(&self.gamma) {
                *v = (*v - mean) * inv * g;
            }
        }
        let out = ActivationTensor::from_matrix(&normed).expect("non-empty");
        let out = hooks.layer_output(Component::TextEncoder, &path("text_encoder.final_layer_norm"), out)?;
        Embedding::from_tensor(&out)
    }
}

/// The built-in backend.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPipeline {
    init_seed: u64,
    unet: ToyUnet,
    vae: ToyVae,
    text_encoder: ToyTextEncoder,
}

impl ToyPipeline {
    pub fn new(init_seed: u64) -> Self {
        Self {
            init_seed,
            unet: ToyUnet::init(init_seed),
            vae: ToyVae::init(init_seed),
            text_encoder: ToyTextEncoder::init(init_seed),
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn unet(&self) -> &ToyUnet {
        &self.unet
    }

    pub fn vae(&self) -> &ToyVae {
        &self.vae
    }

    pub fn text_encoder(&self) -> &ToyTextEncoder {
        &self.text_encoder
    }

    pub fn unet_forward(
        &self,
        x: &ActivationTensor,
        step: usize,
        cond: &Embedding,
        hooks: &mut dyn GenerationHooks,
    ) -> Result<ActivationTensor, PipelineError> {
        self.unet.forward(x, step, cond, hooks)
    }
}

impl BackendAdapter for ToyPipeline {
    fn capabilities(&self) -> Vec<Capability> {
        Capability::ALL.to_vec()
    }

    fn enumerate_submodules(&self, component: Component) -> Result<Vec<SubmoduleInfo>, AdapterError> {
        Ok(match component {
            Component::Unet => self.unet.submodules(),
            Component::Vae => self.vae.submodules(),
            Component::TextEncoder => self.text_encoder.submodules(),
        })
    }

    fn embedding_shape(&self) -> (usize, usize) {
        (EMBED_TOKENS, EMBED_WIDTH)
    }

    fn encode_text(&self, prompt: &str, hooks: &mut dyn GenerationHooks) -> Result<Embedding, PipelineError> {
        self.text_encoder.encode(prompt, hooks)
    }

    /// Fixed-step Euler-style loop; `sampler_id` and `scheduler_id` are
    /// recorded but select nothing here.
    fn sample(
        &self,
        params: &GenerationParams,
        cond: &Embedding,
        uncond: &Embedding,
        hooks: &mut dyn GenerationHooks,
    ) -> Result<SampleOutput, PipelineError> {
        params.validate()?;
        check_latent(params.latent_shape)?;
        for e in [cond, uncond] {
            if e.shape().1 != EMBED_WIDTH {
                return Err(PipelineError::ShapeMismatch {
                    expected: vec![EMBED_TOKENS, EMBED_WIDTH],
                    got: vec![e.shape().0, e.shape().1],
                });
            }
        }
        let guided = params.cfg > 0.0;
        let cfg = params.cfg as f32;
        let mut x = initial_latent(params);
        for step in 0..params.steps {
            hooks.notify_step(step)?;
            let eps_u = self.unet.forward(&x, step, uncond, hooks)?;
            let eps = if guided {
                let eps_c = self.unet.forward(&x, step, cond, hooks)?;
                let mut eps = eps_u;
                for (e, c) in eps.as_mut_slice().iter_mut().zip(eps_c.as_slice()) {
                    *e += cfg * (c - *e);
                }
                eps
            } else {
                eps_u
            };
            for (xv, e) in x.as_mut_slice().iter_mut().zip(eps.as_slice()) {
                *xv -= STEP_SIZE * e;
            }
            if !x.is_finite() {
                return Err(PipelineError::NonFiniteOutput {
                    step,
                    location: "latent".into(),
                });
            }
        }
        Ok(SampleOutput {
            latent: x,
            forwards_per_step: if guided { 2 } else { 1 },
        })
    }

    fn decode(&self, latent: &ActivationTensor, hooks: &mut dyn GenerationHooks) -> Result<ActivationTensor, PipelineError> {
        self.vae.decode(latent, hooks)
    }
}
